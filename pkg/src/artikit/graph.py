"""Connectivity graphs, attention masks and routing embeddings."""
from __future__ import annotations

import hashlib
import json
import re
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import JOINT_TYPES, ArticulatedObject, JointType, ValidationReport
from .errors import ParseError, ShapeError, StructuralError

SEMANTIC_DIM = 16
JOINT_DIM = len(JOINT_TYPES)
ROUTING_DIM = JOINT_DIM + SEMANTIC_DIM


@dataclass(frozen=True)
class GraphNode:
    node_id: int
    label: str
    joint_type: JointType = JointType.FIXED

    def __post_init__(self):
        object.__setattr__(self, "node_id", int(self.node_id))
        object.__setattr__(self, "joint_type", JointType.parse(self.joint_type))


@dataclass(frozen=True)
class ConnectivityGraph:
    """Part census plus parent->child edges.  Node ids index adjacency rows."""

    nodes: tuple
    edges: tuple
    root_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        object.__setattr__(self, "root_id", int(self.root_id))

    def __len__(self):
        return len(self.nodes)

    @property
    def labels(self) -> list:
        return [n.label for n in self.nodes]

    @property
    def joint_types(self) -> list:
        return [n.joint_type for n in self.nodes]

    def parent_of(self) -> dict:
        return {c: p for p, c in self.edges}


def graph_from_object(obj: ArticulatedObject) -> ConnectivityGraph:
    nodes = [GraphNode(p.part_id, p.semantic_label, p.joint.joint_type) for p in obj.parts]
    edges = [(p.parent_id, p.part_id) for p in obj.parts if p.parent_id is not None]
    return ConnectivityGraph(nodes, edges, obj.root_id)


def validate_graph(g: ConnectivityGraph) -> ValidationReport:
    report = ValidationReport()
    ids = [n.node_id for n in g.nodes]
    if not ids:
        report.add("empty", "graph has no nodes")
        return report
    if len(set(ids)) != len(ids):
        report.add("duplicate-id", "node ids are not unique")
    elif sorted(ids) != list(range(len(ids))):
        report.add("sparse-ids", f"node ids must be dense in [0, {len(ids)})")
    id_set = set(ids)
    if g.root_id not in id_set:
        report.add("missing-root", f"root {g.root_id} is not a node")
    seen = set()
    for e in g.edges:
        if e in seen:
            report.add("duplicate-edge", f"edge {e} listed twice")
        seen.add(e)
        if e[0] not in id_set or e[1] not in id_set:
            report.add("dangling-edge", f"edge {e} references a missing node")
        if e[0] == e[1]:
            report.add("self-loop", f"edge {e} is a self loop")
    parents = {}
    for p, c in set(g.edges):
        parents.setdefault(c, set()).add(p)
    for c, ps in sorted(parents.items()):
        if len(ps) > 1:
            report.add("multi-parent", f"node {c} has parents {sorted(ps)}")
    if g.root_id in parents:
        report.add("root-parent", f"root {g.root_id} has a parent")
    orphans = sorted(i for i in id_set if i not in parents)
    if len(orphans) > 1:
        report.add("multiple-roots", f"nodes without parent: {orphans}")
    if report.ok:
        children = {i: [] for i in id_set}
        for p, c in g.edges:
            children[p].append(c)
        reached, queue = {g.root_id}, deque([g.root_id])
        while queue:
            for c in children[queue.popleft()]:
                if c in reached:
                    report.add("cycle", f"node {c} reached twice")
                    return report
                reached.add(c)
                queue.append(c)
        if reached != id_set:
            report.add("disconnected", f"unreachable nodes {sorted(id_set - reached)}")
    return report


def _require_valid(g: ConnectivityGraph):
    report = validate_graph(g)
    if not report.ok:
        raise StructuralError(f"invalid connectivity graph: {report}")


def to_adjacency_matrix(g: ConnectivityGraph) -> np.ndarray:
    """Symmetric boolean adjacency with a false diagonal."""
    _require_valid(g)
    n = len(g.nodes)
    adj = np.zeros((n, n), dtype=bool)
    for p, c in g.edges:
        adj[p, c] = adj[c, p] = True
    return adj


def adjacency_to_attention_mask(adj, self_loops: bool = True, hops: int = 1) -> np.ndarray:
    """Boolean mask: (i, j) true iff j is reachable from i in 1..hops edges.

    The diagonal is set exactly when ``self_loops`` is true.
    """
    adj = np.asarray(adj, dtype=bool)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {adj.shape}")
    n = adj.shape[0]
    reach = np.zeros_like(adj)
    frontier = np.eye(n, dtype=bool)
    step = adj.astype(np.int64)
    for _ in range(int(hops)):
        frontier = (frontier.astype(np.int64) @ step) > 0
        if not (frontier & ~reach).any():
            break
        reach |= frontier
    np.fill_diagonal(reach, bool(self_loops))
    return reach


def structure_mask(g: ConnectivityGraph, hops: int = 1, self_loops: bool = True) -> np.ndarray:
    return adjacency_to_attention_mask(to_adjacency_matrix(g), self_loops=self_loops, hops=hops)


def semantic_embedding(label: str, seed: int = 0, dim: int = SEMANTIC_DIM) -> np.ndarray:
    """Unit vector derived from a keyed hash of the label (process independent)."""
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16, key=str(int(seed)).encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def joint_one_hot(joint_type) -> np.ndarray:
    v = np.zeros(JOINT_DIM)
    v[JOINT_TYPES.index(JointType.parse(joint_type))] = 1.0
    return v


def encode_routing_embeddings(g: ConnectivityGraph, seed: int = 0) -> np.ndarray:
    """``(n_nodes, 21)``: joint-type one-hot (5) followed by the semantic hash (16)."""
    _require_valid(g)
    rows = [np.concatenate([joint_one_hot(n.joint_type), semantic_embedding(n.label, seed)]) for n in g.nodes]
    return np.stack(rows)


# ---------------------------------------------------------------------------
# structure-response schema

_NODE_KEYS = {"id", "label", "joint_type"}
_TOP_KEYS = {"root", "nodes", "edges"}
_FENCE = re.compile(r"^\s*```(?:json)?\s*\n(.*)\n\s*```\s*$", re.S)


def serialize_graph(g: ConnectivityGraph, indent=None) -> str:
    doc = {
        "root": g.root_id,
        "nodes": [{"id": n.node_id, "label": n.label, "joint_type": n.joint_type.value} for n in g.nodes],
        "edges": [[p, c] for p, c in g.edges],
    }
    return json.dumps(doc, indent=indent)


def _fail(msg, payload, path=None):
    raise ParseError(msg, path=path, payload=payload)


def _int(value, path, payload):
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(f"{path}: expected integer, got {value!r}", payload, path)
    return value


def parse_structure_response(payload: str) -> ConnectivityGraph:
    """Parse and validate ``{"root", "nodes", "edges"}``.

    A single surrounding markdown code fence is tolerated; nothing else is
    repaired.  Errors carry the raw payload.
    """
    text = payload
    m = _FENCE.match(text)
    if m:
        text = m.group(1)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        if m:
            offset += len(payload[: m.start(1)].encode("utf-8"))
        raise ParseError(f"malformed structure response at byte {offset}: {exc.msg}",
                         offset=offset, payload=payload) from None
    if not isinstance(doc, dict):
        _fail("structure response must be an object", payload)
    missing = _TOP_KEYS - doc.keys()
    if missing:
        _fail(f"structure response missing {sorted(missing)}", payload, sorted(missing)[0])
    extra = doc.keys() - _TOP_KEYS
    if extra:
        _fail(f"unexpected keys {sorted(extra)}", payload, sorted(extra)[0])
    root = _int(doc["root"], "root", payload)
    if not isinstance(doc["nodes"], list):
        _fail("nodes: expected list", payload, "nodes")
    nodes = []
    for k, raw in enumerate(doc["nodes"]):
        path = f"nodes[{k}]"
        if not isinstance(raw, dict) or raw.keys() != _NODE_KEYS:
            _fail(f"{path}: expected keys {sorted(_NODE_KEYS)}", payload, path)
        jt = raw["joint_type"]
        if not isinstance(jt, str) or jt not in {t.value for t in JointType}:
            _fail(f"{path}.joint_type: unknown joint type {jt!r}", payload, f"{path}.joint_type")
        if not isinstance(raw["label"], str):
            _fail(f"{path}.label: expected string", payload, f"{path}.label")
        nodes.append(GraphNode(_int(raw["id"], f"{path}.id", payload), raw["label"], JointType(jt)))
    if not isinstance(doc["edges"], list):
        _fail("edges: expected list", payload, "edges")
    edges = []
    for k, e in enumerate(doc["edges"]):
        if not isinstance(e, list) or len(e) != 2:
            _fail(f"edges[{k}]: expected [parent, child]", payload, f"edges[{k}]")
        edges.append((_int(e[0], f"edges[{k}][0]", payload), _int(e[1], f"edges[{k}][1]", payload)))
    g = ConnectivityGraph(nodes, edges, root)
    report = validate_graph(g)
    if not report.ok:
        _fail(f"structure response is not a tree: {report}", payload)
    return g
