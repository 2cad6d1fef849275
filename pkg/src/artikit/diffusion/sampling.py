"""Reverse diffusion from noise to valid articulated objects."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from ..core import (
    DEFAULT_SCREW_PITCH,
    INDEX_STATE,
    SLICE_AXIS_DIRECTION,
    SLICE_HALF_EXTENTS,
    SLICE_RANGE,
    ArticulatedObject,
    JointType,
    validate_object,
    vector_to_attributes,
)
from ..errors import ParameterError, StructuralError
from ..graph import ConnectivityGraph, validate_graph
from .model import DTYPE, Denoiser, encode_structure, pack_batch, root_must_be_fixed, sorted_graph
from .schedule import NOISE_MODES, NoiseSchedule
from .training import model_time


def postprocess(vectors: np.ndarray, graph: ConnectivityGraph, category: str = "generated",
                screw_pitch: float = DEFAULT_SCREW_PITCH) -> ArticulatedObject:
    """Turn raw denoised rows (node order) into a valid object.

    Clamps the state to [0, 1], orders each range pair, zeroes the pair the
    joint type does not use, renormalizes the axis and makes half extents
    positive.
    """
    g = sorted_graph(graph)
    V = np.array(vectors, dtype=np.float64)
    if V.shape[0] != len(g.nodes):
        raise ParameterError(f"{V.shape[0]} rows for {len(g.nodes)} graph nodes")
    if not np.all(np.isfinite(V)):
        raise ParameterError("sampled attributes contain non-finite values")
    parent = g.parent_of()
    parts = []
    for i, node in enumerate(g.nodes):
        v = V[i].copy()
        jt = node.joint_type
        v[INDEX_STATE] = min(max(v[INDEX_STATE], 0.0), 1.0)
        r = v[SLICE_RANGE]
        r[:2], r[2:] = np.sort(r[:2]), np.sort(r[2:])
        if not jt.is_rotational:
            r[:2] = 0.0
        if not jt.is_translational:
            r[2:] = 0.0
        v[SLICE_RANGE] = r
        d = v[SLICE_AXIS_DIRECTION]
        norm = float(np.linalg.norm(d))
        v[SLICE_AXIS_DIRECTION] = d / norm if norm >= 1e-6 else (0.0, 0.0, 1.0)
        v[SLICE_HALF_EXTENTS] = np.abs(v[SLICE_HALF_EXTENTS])
        parts.append(vector_to_attributes(v, jt, part_id=node.node_id, label=node.label,
                                          parent_id=parent.get(node.node_id), screw_pitch=screw_pitch))
    obj = ArticulatedObject(parts, g.root_id, category)
    report = validate_object(obj)
    if not report.ok:
        raise StructuralError(f"post-processed sample is invalid: {report}")
    return obj


def _check_graph(g: ConnectivityGraph):
    report = validate_graph(g)
    if not report.ok:
        raise StructuralError(f"invalid connectivity graph: {report}")
    root_must_be_fixed(g)


def denoise(model: Denoiser, graphs: Sequence[ConnectivityGraph], sched: NoiseSchedule, seed: int = 0,
            conds: Optional[Sequence] = None, mode: str = "ddpm", routing_seed: int = 0) -> list:
    """Raw ``A_0`` estimates (one array per graph, rows in node-id order).

    ddpm runs ancestral sampling with the posterior variance; interp runs the
    deterministic Euler scheme on ``A_t = t A_0 + (1 - t) eps`` with ``T`` steps.
    Each graph draws its noise from its own child seed, so results do not
    depend on how graphs are grouped.
    """
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(graphs))]
    return _denoise(model, graphs, sched, rngs, conds, mode, routing_seed)


@torch.no_grad()
def _denoise(model, graphs, sched, rngs, conds, mode, routing_seed) -> list:
    if mode not in NOISE_MODES:
        raise ParameterError(f"unknown noise mode {mode!r}")
    cfg = model.config
    for g in graphs:
        _check_graph(g)
    structures = [encode_structure(g, cfg.hops, routing_seed, cfg.global_attention) for g in graphs]
    batch = pack_batch(structures, conds)
    D = cfg.attribute_dim

    def noise():
        return np.concatenate([r.standard_normal((n, D)) for r, n in zip(rngs, batch.sizes)])

    x = noise()
    T = sched.T
    if mode == "ddpm":
        for t in range(T, 0, -1):
            eps = model(torch.as_tensor(x, dtype=DTYPE), torch.full((batch.n_parts,), float(t), dtype=DTYPE),
                        batch).numpy()
            beta, alpha, ab = sched.betas[t - 1], sched.alphas[t - 1], sched.alpha_bars[t - 1]
            mean = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
            if t > 1:
                var = beta * (1.0 - sched.alpha_bars[t - 2]) / (1.0 - ab)
                x = mean + np.sqrt(var) * noise()
            else:
                x = mean
    else:
        ts = np.linspace(0.0, 1.0, T + 1)
        for a, b in zip(ts[:-1], ts[1:]):
            tm = np.full(batch.n_parts, model_time(a, sched, mode))
            eps = model(torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(tm), batch).numpy()
            x0 = (x - (1.0 - a) * eps) / max(a, 1.0 / T)
            x = b * x0 + (1.0 - b) * eps
    out, start = [], 0
    for n in batch.sizes:
        out.append(x[start:start + n])
        start += n
    return out


def sample_many(model: Denoiser, graphs: Sequence[ConnectivityGraph], sched: NoiseSchedule, seed: int = 0,
                conds: Optional[Sequence] = None, mode: str = "ddpm", category: str = "generated",
                chunk: int = 16, routing_seed: int = 0) -> list:
    """One object per graph; graphs are processed ``chunk`` at a time."""
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(len(graphs))]
    objs = []
    for a in range(0, len(graphs), chunk):
        sub = list(graphs[a:a + chunk])
        sub_conds = None if conds is None else list(conds[a:a + chunk])
        raws = _denoise(model, sub, sched, rngs[a:a + chunk], sub_conds, mode, routing_seed)
        objs.extend(postprocess(r, g, category) for r, g in zip(raws, sub))
    return objs


def sample(model: Denoiser, graph: ConnectivityGraph, sched: NoiseSchedule, seed: int = 0, cond=None,
           mode: str = "ddpm", category: str = "generated", routing_seed: int = 0) -> ArticulatedObject:
    raw = denoise(model, [graph], sched, seed, None if cond is None else [cond], mode, routing_seed)[0]
    return postprocess(raw, graph, category)
