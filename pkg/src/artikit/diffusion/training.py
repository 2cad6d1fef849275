"""Diffusion objective, gradient verification, the toy training loop and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..core import ArticulatedObject, object_to_matrix, sample_states, shuffle_parts, validate_object
from ..errors import FormatError, ParameterError, TrainingError
from .model import DTYPE, Denoiser, DenoiserConfig, PartBatch, encode_structure, object_structure, pack_batch
from .schedule import NOISE_MODES, NoiseSchedule, forward_noise, make_noise_schedule

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ARTIKIT-CKPT-1\n"


# ---------------------------------------------------------------------------
# objective

def draw_noise(batch: PartBatch, attr_dim: int, sched: NoiseSchedule, seed, mode: str = "ddpm"):
    """Per-object timesteps (broadcast to parts) and standard normal noise."""
    rng = np.random.default_rng(seed)
    if mode == "ddpm":
        t_obj = rng.integers(1, sched.T + 1, size=batch.n_objects)
    elif mode == "interp":
        t_obj = rng.random(batch.n_objects)
    else:
        raise ParameterError(f"unknown noise mode {mode!r}; expected one of {NOISE_MODES}")
    eps = rng.standard_normal((batch.n_parts, attr_dim))
    return np.repeat(t_obj, batch.sizes), eps


def model_time(t, sched: NoiseSchedule, mode: str) -> np.ndarray:
    """Value fed to the timestep embedding: the step index, or its interp equivalent."""
    t = np.asarray(t, dtype=np.float64)
    return t if mode == "ddpm" else (1.0 - t) * sched.T


def diffusion_loss(model: Denoiser, A0, batch: PartBatch, sched: NoiseSchedule, seed=0,
                   mode: str = "ddpm") -> torch.Tensor:
    """Mean squared error between drawn noise and its prediction (differentiable)."""
    A0 = torch.as_tensor(np.asarray(A0, dtype=np.float64), dtype=DTYPE)
    t, eps = draw_noise(batch, A0.shape[1], sched, seed, mode)
    eps = torch.as_tensor(eps, dtype=DTYPE)
    At = forward_noise(A0, t, eps, sched, mode)
    pred = model(At, torch.as_tensor(model_time(t, sched, mode)), batch)
    return ((eps - pred) ** 2).mean()


def loss_and_gradients(model: Denoiser, A0, batch: PartBatch, sched: NoiseSchedule, seed=0,
                       mode: str = "ddpm") -> tuple:
    """``(loss, {parameter name: gradient array})`` by reverse-mode differentiation."""
    model.zero_grad(set_to_none=True)
    loss = diffusion_loss(model, A0, batch, sched, seed, mode)
    loss.backward()
    grads = {n: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
             for n, p in model.named_parameters()}
    return float(loss.detach()), grads


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    entries: list = field(default_factory=list)  # (name, flat index, analytic, numeric, rel error)


def grad_check(model: Denoiser, A0, batch: PartBatch, sched: NoiseSchedule, h: float = 1e-5,
               n_params: int = 200, seed: int = 0, loss_seed: int = 0, mode: str = "ddpm",
               names: Optional[Sequence[str]] = None) -> GradCheckResult:
    """Compare autograd gradients with central differences on sampled scalar parameters.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.  Restricting ``names``
    checks only the listed parameters.
    """
    _, grads = loss_and_gradients(model, A0, batch, sched, loss_seed, mode)
    params = dict(model.named_parameters())
    pool = [n for n in params if names is None or n in names]
    sizes = np.array([params[n].numel() for n in pool])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_params, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    entries = []
    with torch.no_grad():
        for flat in np.sort(picks):
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, idx = pool[k], int(flat - offsets[k])
            view = params[name].view(-1)
            orig = view[idx].item()
            view[idx] = orig + h
            f_plus = float(diffusion_loss(model, A0, batch, sched, loss_seed, mode))
            view[idx] = orig - h
            f_minus = float(diffusion_loss(model, A0, batch, sched, loss_seed, mode))
            view[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(grads[name].reshape(-1)[idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            entries.append((name, idx, analytic, numeric, rel))
    worst = max((e[4] for e in entries), default=0.0)
    return GradCheckResult(worst, len(entries), entries)


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    lr_min: Optional[float] = None  # cosine decay from lr to lr_min when set, constant otherwise
    clip_norm: float = 10.0
    seed: int = 0
    repeats: int = 4  # noisy copies of every object per step, each with its own t
    shuffle_parts: bool = True
    resample_states: bool = True
    mode: str = "ddpm"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    routing_seed: int = 0
    smoothing_window: int = 100
    divergence_threshold: float = 1e3
    log_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ParameterError("steps must be >= 0")
        if not self.lr > 0:
            raise ParameterError("lr must be positive")
        if self.lr_min is not None and not 0 <= self.lr_min <= self.lr:
            raise ParameterError("lr_min must lie in [0, lr]")
        if self.repeats < 1:
            raise ParameterError("repeats must be >= 1")
        if self.mode not in NOISE_MODES:
            raise ParameterError(f"unknown noise mode {self.mode!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_min is None or self.steps <= 1:
            return self.lr
        frac = (step - 1) / (self.steps - 1)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))

    def schedule(self) -> NoiseSchedule:
        return make_noise_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class TrainResult:
    model: Denoiser
    trace: list  # (step, loss, lr)
    smoothed_loss: float


def smoothed(trace: list, window: int = 100) -> float:
    if not trace:
        return float("nan")
    return float(np.mean([row[1] for row in trace[-window:]]))


def _as_object(item) -> ArticulatedObject:
    return item if isinstance(item, ArticulatedObject) else item[0]


def train_toy(dataset: Sequence, model_config: Optional[DenoiserConfig] = None,
              config: Optional[TrainConfig] = None, conds: Optional[Sequence] = None,
              checkpoint_path=None, trace_path=None) -> TrainResult:
    """Full-batch SGD on the noise-prediction objective.

    Every step visits each object ``repeats`` times; before that each object
    has its part order shuffled and (optionally) its joint states redrawn
    uniformly.  The loss trace holds one row per step.
    """
    config = config or TrainConfig()
    objects = [_as_object(it) for it in dataset]
    if not objects:
        raise ParameterError("training set is empty")
    for k, obj in enumerate(objects):
        report = validate_object(obj)
        if not report.ok:
            raise ParameterError(f"training object {k} is invalid: {report}")
    model_config = model_config or DenoiserConfig()
    if model_config.max_time != config.T:
        # the timestep embedding is scaled to the schedule being trained on
        model_config = dataclasses.replace(model_config, max_time=float(config.T))
    if conds is not None and len(conds) != len(objects):
        raise ParameterError("need one condition entry (or None) per training object")
    model = Denoiser(model_config)
    sched = config.schedule()
    base = [encode_structure(object_structure(o), model_config.hops, config.routing_seed,
                             model_config.global_attention) for o in objects]
    rng = np.random.default_rng(config.seed)
    trace = []
    params = list(model.parameters())
    for step in range(1, config.steps + 1):
        structures, rows, step_conds = [], [], []
        for k, obj in enumerate(objects):
            o = obj
            if config.resample_states:
                o = o.with_states(sample_states(o, 1, int(rng.integers(2**63)))[0])
            perm = np.arange(len(o.parts))
            if config.shuffle_parts:
                o, perm = shuffle_parts(o, int(rng.integers(2**63)), return_permutation=True)
            A = object_to_matrix(o)
            enc = base[k].permuted(perm)
            for _ in range(config.repeats):
                structures.append(enc)
                rows.append(A)
                step_conds.append(None if conds is None else conds[k])
        batch = pack_batch(structures, step_conds if conds is not None else None)
        A0 = np.concatenate(rows)
        model.zero_grad(set_to_none=True)
        loss = diffusion_loss(model, A0, batch, sched, int(rng.integers(2**63)), config.mode)
        value = float(loss.detach())
        lr = config.lr_at(step)
        trace.append((step, value, lr))
        if not math.isfinite(value) or value > config.divergence_threshold:
            raise TrainingError(f"training diverged at step {step}: loss {value}", trace=trace)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
        with torch.no_grad():
            for p in params:
                if p.grad is not None:
                    p -= lr * p.grad
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.5f smoothed %.5f", step, value, smoothed(trace, config.smoothing_window))
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    if trace_path is not None:
        save_trace(trace_path, trace)
    return TrainResult(model, trace, smoothed(trace, config.smoothing_window))


def save_trace(path, trace: list) -> None:
    from ..io.canonical import atomic_write_text

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "lr"])
    for step, loss, lr in trace:
        w.writerow([step, repr(float(loss)), repr(float(lr))])
    atomic_write_text(path, buf.getvalue())


def load_trace(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "loss", "lr"]:
        raise FormatError(f"{path}: not a loss trace")
    return [(int(s), float(l), float(r)) for s, l, r in rows[1:]]


# ---------------------------------------------------------------------------
# checkpoints
#
# magic | u32 config length | config JSON | u32 tensor count |
#   per tensor: u16 name length | name | u8 ndim | u32 dims... | float64 LE values

def checkpoint_bytes(model: Denoiser) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(cfg)) + cfg
    named = list(model.named_parameters())
    out += struct.pack("<I", len(named))
    for name, p in named:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape)
        out += p.detach().numpy().astype("<f8").tobytes()
    return bytes(out)


def save_checkpoint(path, model: Denoiser) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(checkpoint_bytes(model))
    os.replace(tmp, path)


def load_checkpoint(path) -> Denoiser:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: missing checkpoint header")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (n_cfg,) = struct.unpack("<I", take(4))
    try:
        cfg = DenoiserConfig.from_dict(json.loads(take(n_cfg).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad checkpoint config: {exc}") from None
    model = Denoiser(cfg)
    params = dict(model.named_parameters())
    (count,) = struct.unpack("<I", take(4))
    if count != len(params):
        raise FormatError(f"{path}: {count} tensors, model expects {len(params)}")
    with torch.no_grad():
        for _ in range(count):
            (n_name,) = struct.unpack("<H", take(2))
            name = take(n_name).decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            if name not in params or tuple(params[name].shape) != shape:
                raise FormatError(f"{path}: unexpected tensor {name!r} with shape {shape}")
            n = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape)
            params[name].copy_(torch.from_numpy(values.astype(np.float64)))
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after checkpoint")
    return model
