"""Toy denoiser over part-attribute tokens.

Each part contributes one token per attribute group (box, axis, range, state
and, when present, the shape latent).  A layer runs local attention inside
each part's token span, global attention between parts allowed by the
structure mask, cross-attention to condition tokens and a sparse
mixture-of-experts feed-forward whose gate sees the token and the part's
routing embedding.  Several objects can share one packed sequence; masks keep
them independent.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from ..core import BASE_ATTRIBUTE_DIM, ArticulatedObject, JointType
from ..errors import ParameterError, ShapeError, StructuralError
from ..graph import (
    ROUTING_DIM,
    ConnectivityGraph,
    GraphNode,
    adjacency_to_attention_mask,
    encode_routing_embeddings,
    to_adjacency_matrix,
    validate_graph,
)

DTYPE = torch.float64
TIME_DIM = 16
_MASKED = -1e300  # finite stand-in for -inf so fully masked rows stay differentiable


@dataclass(frozen=True)
class DenoiserConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    latent_dim: int = 0
    n_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 128
    cond_dim: int = 32
    seed: int = 0
    hops: int = 1
    global_attention: str = "structure"  # or "full"
    zero_init: bool = True  # output head and cross-attention output start at zero
    max_time: float = 1000.0  # diffusion step count the timestep embedding is scaled to

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ParameterError(f"top_k must be in [1, n_experts], got {self.top_k}")
        if self.global_attention not in ("structure", "full"):
            raise ParameterError(f"global_attention must be 'structure' or 'full', got {self.global_attention!r}")
        for name in ("d_model", "n_heads", "n_layers", "n_experts", "expert_hidden", "cond_dim", "hops"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.latent_dim < 0:
            raise ParameterError("latent_dim must be non-negative")
        if not self.max_time > 0:
            raise ParameterError("max_time must be positive")

    @property
    def attribute_dim(self) -> int:
        return BASE_ATTRIBUTE_DIM + self.latent_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown denoiser config keys {sorted(unknown)}")
        return cls(**d)


def attribute_groups(latent_dim: int = 0) -> list:
    groups = [("box", slice(0, 9)), ("axis", slice(9, 15)), ("range", slice(15, 19)), ("state", slice(19, 20))]
    if latent_dim:
        groups.append(("latent", slice(20, 20 + latent_dim)))
    return groups


# ---------------------------------------------------------------------------
# batches

@dataclass
class PartBatch:
    """Packed structure of one or more objects (everything except the attributes)."""

    routing: torch.Tensor  # (P, ROUTING_DIM)
    part_object: torch.Tensor  # (P,) object index of each part
    part_mask: torch.Tensor  # (P, P) bool, block diagonal over objects
    sizes: tuple
    cond: Optional[torch.Tensor] = None  # (C, cond_dim)
    cond_object: Optional[torch.Tensor] = None  # (C,)

    @property
    def n_parts(self) -> int:
        return int(self.routing.shape[0])

    @property
    def n_objects(self) -> int:
        return len(self.sizes)


def sorted_graph(g: ConnectivityGraph) -> ConnectivityGraph:
    """Same graph with nodes listed by id, so row ``i`` of any per-node array is node ``i``."""
    nodes = sorted(g.nodes, key=lambda n: n.node_id)
    return ConnectivityGraph(nodes, g.edges, g.root_id)


def object_structure(obj: ArticulatedObject) -> ConnectivityGraph:
    """Graph indexed by part position (ids in the object may be in any order)."""
    pos = {p.part_id: i for i, p in enumerate(obj.parts)}
    nodes = [GraphNode(i, p.semantic_label, p.joint.joint_type) for i, p in enumerate(obj.parts)]
    edges = [(pos[p.parent_id], i) for i, p in enumerate(obj.parts) if p.parent_id is not None]
    return ConnectivityGraph(nodes, edges, pos[obj.root_id])


@dataclass(frozen=True)
class StructureEncoding:
    routing: np.ndarray
    mask: np.ndarray

    def permuted(self, perm) -> "StructureEncoding":
        perm = np.asarray(perm)
        return StructureEncoding(self.routing[perm], self.mask[np.ix_(perm, perm)])


def encode_structure(g: ConnectivityGraph, hops: int = 1, routing_seed: int = 0,
                     global_attention: str = "structure") -> StructureEncoding:
    report = validate_graph(g)
    if not report.ok:
        raise StructuralError(f"invalid connectivity graph: {report}")
    g = sorted_graph(g)
    routing = encode_routing_embeddings(g, routing_seed)
    if global_attention == "full":
        mask = np.ones((len(g), len(g)), dtype=bool)
    else:
        mask = adjacency_to_attention_mask(to_adjacency_matrix(g), self_loops=True, hops=hops)
    return StructureEncoding(routing, mask)


def pack_batch(structures: Sequence[StructureEncoding], conds: Optional[Sequence] = None) -> PartBatch:
    sizes = tuple(len(s.routing) for s in structures)
    P = sum(sizes)
    mask = np.zeros((P, P), dtype=bool)
    owner = np.repeat(np.arange(len(sizes)), sizes)
    start = 0
    for s, n in zip(structures, sizes):
        mask[start:start + n, start:start + n] = s.mask
        start += n
    routing = torch.as_tensor(np.concatenate([s.routing for s in structures]), dtype=DTYPE)
    cond = cond_object = None
    if conds is not None:
        if len(conds) != len(structures):
            raise ShapeError("need one condition entry (or None) per object")
        rows, owners = [], []
        for k, c in enumerate(conds):
            if c is None:
                continue
            c = np.asarray(c, dtype=np.float64)
            if c.ndim != 2:
                raise ShapeError(f"condition tokens must be a matrix, got shape {c.shape}")
            rows.append(c)
            owners.append(np.full(len(c), k))
        if rows:
            dims = {r.shape[1] for r in rows}
            if len(dims) != 1:
                raise ShapeError(f"condition token dims differ: {sorted(dims)}")
            cond = torch.as_tensor(np.concatenate(rows), dtype=DTYPE)
            cond_object = torch.as_tensor(np.concatenate(owners))
    return PartBatch(routing, torch.as_tensor(owner), torch.as_tensor(mask), sizes, cond, cond_object)


def span_mask(spans: Sequence[tuple], n_tokens: int) -> torch.Tensor:
    """Block mask from ``(start, stop)`` spans; spans must partition ``range(n_tokens)``."""
    owner = np.full(n_tokens, -1)
    for k, (a, b) in enumerate(spans):
        if not 0 <= a < b <= n_tokens:
            raise StructuralError(f"span {(a, b)} outside the token sequence")
        if np.any(owner[a:b] >= 0):
            raise StructuralError(f"span {(a, b)} overlaps another span")
        owner[a:b] = k
    if np.any(owner < 0):
        raise StructuralError("spans leave tokens uncovered")
    o = torch.as_tensor(owner)
    return o[:, None] == o[None, :]


# ---------------------------------------------------------------------------
# modules

class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, gen: torch.Generator, zero: bool = False, bias: bool = True):
        super().__init__()
        if zero:
            w = torch.zeros(n_out, n_in, dtype=DTYPE)
        else:
            w = torch.randn(n_out, n_in, generator=gen, dtype=DTYPE) / math.sqrt(n_in)
        self.weight = nn.Parameter(w)
        if bias:
            self.bias = nn.Parameter(torch.zeros(n_out, dtype=DTYPE))
        else:
            self.register_parameter("bias", None)

    def forward(self, x):
        y = x @ self.weight.T
        return y if self.bias is None else y + self.bias


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-8):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.eps = eps

    def forward(self, x):
        return x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + self.eps) * self.weight


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask``; rows without any allowed entry give 0."""
    w = torch.softmax(scores.masked_fill(~mask, _MASKED), dim=-1)
    has_any = mask.any(dim=-1, keepdim=True)
    return w * has_any


class Attention(nn.Module):
    """Multi-head attention over independent groups: ``x`` is ``(B, Lq, d)``, mask ``(B, Lq, Lk)``."""

    def __init__(self, d: int, heads: int, gen: torch.Generator, kv_dim: Optional[int] = None,
                 zero_out: bool = False):
        super().__init__()
        kv_dim = d if kv_dim is None else kv_dim
        self.heads = heads
        self.q = Linear(d, d, gen)
        # a key bias only shifts every score in a row equally, so it would be a dead parameter
        self.k = Linear(kv_dim, d, gen, bias=False)
        self.v = Linear(kv_dim, d, gen)
        self.o = Linear(d, d, gen, zero=zero_out)

    def forward(self, x, mask, kv=None, return_weights=False):
        kv = x if kv is None else kv
        B, n, d = x.shape
        h = self.heads
        dh = d // h
        q = self.q(x).view(B, n, h, dh).transpose(1, 2)
        k = self.k(kv).view(B, -1, h, dh).transpose(1, 2)
        v = self.v(kv).view(B, -1, h, dh).transpose(1, 2)
        w = masked_softmax(q @ k.transpose(2, 3) / math.sqrt(dh), mask.unsqueeze(1))
        out = self.o((w @ v).transpose(1, 2).reshape(B, n, d))
        return (out, w) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, gen: torch.Generator):
        super().__init__()
        self.w1 = Linear(d, hidden, gen)
        self.w2 = Linear(hidden, d, gen)

    def forward(self, x):
        return self.w2(torch.nn.functional.silu(self.w1(x)))


def top_k_gates(logits: torch.Tensor, k: int) -> torch.Tensor:
    """Softmax over the ``k`` largest logits per row; the rest get weight 0.

    Equal logits are ranked by lower expert index.
    """
    order = torch.argsort(-logits.detach(), dim=-1, stable=True)[:, :k]
    keep = torch.zeros_like(logits, dtype=torch.bool).scatter_(1, order, True)
    return torch.softmax(logits.masked_fill(~keep, float("-inf")), dim=-1)


class MoE(nn.Module):
    def __init__(self, d: int, hidden: int, n_experts: int, top_k: int, gen: torch.Generator):
        super().__init__()
        self.top_k = top_k
        self.gate = Linear(d + ROUTING_DIM, n_experts, gen)
        self.shared = FeedForward(d, hidden, gen)
        self.experts = nn.ModuleList(FeedForward(d, hidden, gen) for _ in range(n_experts))

    def forward(self, x, routing, return_gates=False):
        gates = top_k_gates(self.gate(torch.cat([x, routing], dim=-1)), self.top_k)
        out = self.shared(x)
        for i, expert in enumerate(self.experts):
            out = out + gates[:, i:i + 1] * expert(x)
        return (out, gates) if return_gates else out


class Block(nn.Module):
    def __init__(self, cfg: DenoiserConfig, gen: torch.Generator):
        super().__init__()
        d = cfg.d_model
        self.norm_local = RMSNorm(d)
        self.local_attn = Attention(d, cfg.n_heads, gen)
        self.norm_global = RMSNorm(d)
        self.global_attn = Attention(d, cfg.n_heads, gen)
        self.norm_cross = RMSNorm(d)
        self.cross_attn = Attention(d, cfg.n_heads, gen, kv_dim=cfg.cond_dim, zero_out=cfg.zero_init)
        self.norm_moe = RMSNorm(d)
        self.moe = MoE(d, cfg.expert_hidden, cfg.n_experts, cfg.top_k, gen)


def timestep_embedding(t: torch.Tensor, dim: int = TIME_DIM, max_time: float = 1000.0) -> torch.Tensor:
    """Sinusoidal features of ``tau = t / max_time`` at frequencies ``k * pi / 2``, k = 1..dim/2.

    Low, evenly spaced frequencies keep neighbouring steps close in feature
    space; the usual geometric ladder up to frequency 1 aliases badly over
    integer steps at this embedding width.
    """
    half = dim // 2
    freqs = math.pi / 2 * torch.arange(1, half + 1, dtype=DTYPE)
    arg = (t.to(DTYPE) / max_time)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


@dataclass
class TokenContext:
    """Token layout of a PartBatch.

    Tokens are part-major (``G`` consecutive tokens per part) and objects are
    contiguous.  ``obj_index``/``obj_valid`` gather each object's tokens into
    a padded ``(B, L)`` block so global and cross attention never mix objects.
    """

    n_groups: int
    routing: torch.Tensor  # (n_tokens, ROUTING_DIM)
    obj_index: torch.Tensor  # (B, L)
    obj_valid: torch.Tensor  # (B, L)
    global_mask: torch.Tensor  # (B, L, L)
    cond: Optional[torch.Tensor] = None  # (B, C, cond_dim)
    cross_mask: Optional[torch.Tensor] = None  # (B, L, C)

    @property
    def n_tokens(self) -> int:
        return int(self.routing.shape[0])

    def gather(self, h: torch.Tensor) -> torch.Tensor:
        return h[self.obj_index]

    def scatter(self, y: torch.Tensor) -> torch.Tensor:
        return y[self.obj_valid]

    def dense(self, w: torch.Tensor) -> torch.Tensor:
        """Expand per-object ``(B, heads, L, L)`` weights to ``(heads, n_tokens, n_tokens)``."""
        out = torch.zeros(w.shape[1], self.n_tokens, self.n_tokens, dtype=w.dtype)
        for b in range(w.shape[0]):
            idx = self.obj_index[b][self.obj_valid[b]]
            m = int(idx.numel())
            out[:, idx[:, None], idx[None, :]] = w[b, :, :m, :m]
        return out


class Denoiser(nn.Module):
    """Noise predictor ``eps_theta(A_t, t, c)`` over packed part attributes."""

    def __init__(self, config: Optional[DenoiserConfig] = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        gen = torch.Generator().manual_seed(cfg.seed)
        self.groups = attribute_groups(cfg.latent_dim)
        d = cfg.d_model
        self.inp = nn.ModuleList(Linear(s.stop - s.start, d, gen) for _, s in self.groups)
        self.group_embed = nn.Parameter(torch.randn(len(self.groups), d, generator=gen, dtype=DTYPE) * 0.1)
        self.routing_proj = Linear(ROUTING_DIM, d, gen)
        self.time_proj = Linear(TIME_DIM, d, gen)
        self.layers = nn.ModuleList(Block(cfg, gen) for _ in range(cfg.n_layers))
        self.norm_out = RMSNorm(d)
        self.out = nn.ModuleList(Linear(d, s.stop - s.start, gen, zero=cfg.zero_init) for _, s in self.groups)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def parameter_registry(self) -> dict:
        return dict(self.named_parameters())

    def token_context(self, batch: PartBatch) -> TokenContext:
        G = self.n_groups
        part_of = torch.arange(batch.n_parts).repeat_interleave(G)
        sizes = [n * G for n in batch.sizes]
        L = max(sizes)
        B = len(sizes)
        index = torch.zeros(B, L, dtype=torch.long)
        valid = torch.zeros(B, L, dtype=torch.bool)
        start = 0
        for b, n in enumerate(sizes):
            index[b, :n] = torch.arange(start, start + n)
            valid[b, :n] = True
            start += n
        pm = batch.part_mask[part_of][:, part_of]
        glob = pm[index[:, :, None], index[:, None, :]] & valid[:, :, None] & valid[:, None, :]
        ctx = TokenContext(G, batch.routing[part_of], index, valid, glob)
        if batch.cond is not None:
            if batch.cond.shape[1] != self.config.cond_dim:
                raise ShapeError(f"condition dim {batch.cond.shape[1]} != cond_dim {self.config.cond_dim}")
            counts = torch.bincount(batch.cond_object, minlength=B)
            C = int(counts.max())
            cond = torch.zeros(B, C, self.config.cond_dim, dtype=DTYPE)
            cvalid = torch.zeros(B, C, dtype=torch.bool)
            for b in range(B):
                rows = batch.cond[batch.cond_object == b]
                cond[b, :len(rows)] = rows
                cvalid[b, :len(rows)] = True
            ctx.cond = cond
            ctx.cross_mask = valid[:, :, None] & cvalid[:, None, :]
        return ctx

    def embed(self, attrs: torch.Tensor, t: torch.Tensor, batch: PartBatch) -> torch.Tensor:
        attrs = torch.as_tensor(attrs, dtype=DTYPE)
        if attrs.ndim != 2 or attrs.shape[1] != self.config.attribute_dim:
            raise ShapeError(f"attributes must be (P, {self.config.attribute_dim}), got {tuple(attrs.shape)}")
        if attrs.shape[0] != batch.n_parts:
            raise ShapeError(f"{attrs.shape[0]} attribute rows for {batch.n_parts} parts")
        t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch.n_parts)
        temb = timestep_embedding(t, max_time=self.config.max_time)
        per_part = self.routing_proj(batch.routing) + self.time_proj(temb)
        toks = [lin(attrs[:, s]) + self.group_embed[g] + per_part
                for g, ((_, s), lin) in enumerate(zip(self.groups, self.inp))]
        return torch.stack(toks, dim=1).reshape(-1, self.config.d_model)  # part-major

    def head(self, h: torch.Tensor) -> torch.Tensor:
        h = self.norm_out(h).view(-1, self.n_groups, self.config.d_model)
        return torch.cat([lin(h[:, g]) for g, lin in enumerate(self.out)], dim=-1)

    def forward(self, attrs, t, batch: PartBatch) -> torch.Tensor:
        ctx = self.token_context(batch)
        h = self.embed(attrs, t, batch)
        for layer in self.layers:
            h = run_block(layer, h, ctx)
        return self.head(h)


# ---------------------------------------------------------------------------
# per-stage operators (exposed for inspection and tests)

def local_global_attention(layer: Block, h: torch.Tensor, ctx: TokenContext, return_weights=False):
    """Attention inside each part's token span, then across parts allowed by the structure mask.

    With ``return_weights`` the dense ``(heads, tokens, tokens)`` weight
    matrices of both passes are returned as well.
    """
    G, d = ctx.n_groups, h.shape[-1]
    x = layer.norm_local(h).view(-1, G, d)
    full = torch.ones(x.shape[0], G, G, dtype=torch.bool)
    a, w_local = layer.local_attn(x, full, return_weights=True)
    h = h + a.reshape(-1, d)
    g, w_global = layer.global_attn(ctx.gather(layer.norm_global(h)), ctx.global_mask, return_weights=True)
    h = h + ctx.scatter(g)
    if not return_weights:
        return h
    n = ctx.n_tokens
    dense_local = torch.zeros(w_local.shape[1], n, n, dtype=h.dtype)
    for p in range(w_local.shape[0]):
        dense_local[:, p * G:(p + 1) * G, p * G:(p + 1) * G] = w_local[p]
    return h, dense_local, ctx.dense(w_global)


def cross_attention_inject(layer: Block, h: torch.Tensor, ctx: TokenContext, return_weights=False):
    """``h + CrossAttn(Norm(h), cond)``; identity when there are no condition tokens."""
    if ctx.cond is None:
        return (h, None) if return_weights else h
    c, w = layer.cross_attn(ctx.gather(layer.norm_cross(h)), ctx.cross_mask, kv=ctx.cond, return_weights=True)
    h = h + ctx.scatter(c)
    return (h, w) if return_weights else h


def moe_layer(layer: Block, h: torch.Tensor, ctx: TokenContext, return_gates=False):
    m, gates = layer.moe(layer.norm_moe(h), ctx.routing, return_gates=True)
    return (h + m, gates) if return_gates else h + m


def run_block(layer: Block, h: torch.Tensor, ctx: TokenContext) -> torch.Tensor:
    h = local_global_attention(layer, h, ctx)
    h = cross_attention_inject(layer, h, ctx)
    return moe_layer(layer, h, ctx)


def root_must_be_fixed(g: ConnectivityGraph) -> None:
    for n in g.nodes:
        if n.node_id == g.root_id and n.joint_type is not JointType.FIXED:
            raise StructuralError(f"root node {n.node_id} must have a fixed joint, got {n.joint_type.value}")
