"""Train a small denoiser on the synthetic set for a few hundred steps and sample from it.

This is a smoke-scale run (about a minute on one core). The acceptance suite
trains the full-size model for 2000 steps.
"""
import argparse

import numpy as np

from artikit.core import validate_object
from artikit.diffusion import DenoiserConfig, TrainConfig, make_noise_schedule, sample_many, train_toy
from artikit.graph import graph_from_object
from artikit.synthetic import condition_tokens, toy_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--lr", type=float, default=0.3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    items = toy_dataset()
    cfg = DenoiserConfig(d_model=32, n_layers=2, expert_hidden=64)
    conds = [condition_tokens(o.category, dim=cfg.cond_dim) for o, _ in items]
    result = train_toy(items, cfg, TrainConfig(steps=args.steps, lr=args.lr, lr_min=0.0, seed=args.seed), conds)
    losses = [row[1] for row in result.trace]
    for step in range(0, len(losses), max(1, len(losses) // 6)):
        print(f"step {step + 1:5d}  loss {losses[step]:.4f}")
    print(f"smoothed loss {result.smoothed_loss:.4f}")

    graphs = [graph_from_object(o) for o, _ in items]
    samples = sample_many(result.model, graphs, make_noise_schedule(), seed=args.seed, conds=conds)
    for (ref, _), obj in zip(items, samples):
        ok = validate_object(obj).ok
        states = np.round([p.state for p in obj.parts], 2)
        print(f"{ref.category:13s} {len(obj.parts)} parts  valid={ok}  states={states.tolist()}")


if __name__ == "__main__":
    main()
