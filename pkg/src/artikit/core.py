"""Articulated-object representation, kinematic posing and state sampling.

Every part carries five attribute groups: an oriented bounding box (9 numbers),
a joint axis (origin + direction, 6 numbers), a joint range (4 numbers), a
normalized state in [0, 1] and an optional shape latent.  Geometry stored on
an :class:`ArticulatedObject` is always the *rest* configuration (every state
at its range minimum); the ``state`` fields record the articulation that the
object is currently in and :func:`pose_object` produces world-space geometry.

Rigid transforms are plain 4x4 homogeneous ``numpy`` arrays.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import (
    MeshLookupError,
    ParameterError,
    RangeError,
    ShapeError,
    StructuralError,
)

DEFAULT_SCREW_PITCH = 0.02  # m/rad
MIN_HALF_EXTENT = 1e-6
MIN_AXIS_NORM = 1e-6
BASE_ATTRIBUTE_DIM = 20

# attribute vector layout: b(9) | l(6) | r(4) | s(1) | f(F)
SLICE_CENTER = slice(0, 3)
SLICE_HALF_EXTENTS = slice(3, 6)
SLICE_ROTATION = slice(6, 9)
SLICE_BOX = slice(0, 9)
SLICE_AXIS_ORIGIN = slice(9, 12)
SLICE_AXIS_DIRECTION = slice(12, 15)
SLICE_RANGE = slice(15, 19)
INDEX_STATE = 19
SLICE_LATENT = slice(20, None)


class JointType(str, enum.Enum):
    FIXED = "fixed"
    REVOLUTE = "revolute"
    CONTINUOUS = "continuous"
    PRISMATIC = "prismatic"
    SCREW = "screw"

    @property
    def is_rotational(self) -> bool:
        return self in (JointType.REVOLUTE, JointType.CONTINUOUS)

    @property
    def is_translational(self) -> bool:
        return self in (JointType.PRISMATIC, JointType.SCREW)

    @classmethod
    def parse(cls, value) -> "JointType":
        if isinstance(value, JointType):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ParameterError(f"unknown joint type {value!r}") from None


JOINT_TYPES = tuple(JointType)


def _vec(values, n: int, name: str) -> tuple:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (n,):
        raise ShapeError(f"{name} must have {n} components, got {arr.shape[0]}")
    return tuple(float(x) for x in arr)


@dataclass(frozen=True)
class JointSpec:
    """Joint connecting a part to its parent, expressed in the rest object frame.

    ``range`` is ``(rot_min, rot_max, trans_min, trans_max)``.  The direction is
    renormalized on construction when it is off unit length by more than 1e-12.
    """

    origin: tuple = (0.0, 0.0, 0.0)
    direction: tuple = (0.0, 0.0, 1.0)
    joint_type: JointType = JointType.FIXED
    range: tuple = (0.0, 0.0, 0.0, 0.0)
    screw_pitch: float = DEFAULT_SCREW_PITCH

    def __post_init__(self):
        object.__setattr__(self, "joint_type", JointType.parse(self.joint_type))
        object.__setattr__(self, "origin", _vec(self.origin, 3, "axis origin"))
        object.__setattr__(self, "range", _vec(self.range, 4, "joint range"))
        object.__setattr__(self, "screw_pitch", float(self.screw_pitch))
        d = np.asarray(_vec(self.direction, 3, "axis direction"))
        norm = float(np.linalg.norm(d))
        if not norm >= MIN_AXIS_NORM:
            raise ParameterError(f"axis direction norm {norm:.3g} below {MIN_AXIS_NORM}")
        if abs(norm - 1.0) > 1e-12:
            d = d / norm
        object.__setattr__(self, "direction", tuple(float(x) for x in d))

    @property
    def motion_limits(self) -> tuple:
        """(lower, upper) of the pair that drives this joint type."""
        if self.joint_type.is_rotational:
            return self.range[0], self.range[1]
        if self.joint_type.is_translational:
            return self.range[2], self.range[3]
        return 0.0, 0.0


@dataclass(frozen=True)
class OrientedBox:
    """Box with axis-angle ``rotation`` (|theta| <= pi) and positive half extents."""

    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.5, 0.5, 0.5)
    rotation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, 3, "OBB center"))
        half = _vec(self.half_extents, 3, "OBB half extents")
        half = tuple(h if h >= MIN_HALF_EXTENT else MIN_HALF_EXTENT for h in half)
        object.__setattr__(self, "half_extents", half)
        rot = _vec(self.rotation, 3, "OBB rotation")
        if math.sqrt(sum(r * r for r in rot)) > math.pi:
            rot = tuple(float(x) for x in Rotation.from_rotvec(rot).as_rotvec())
        object.__setattr__(self, "rotation", rot)

    @property
    def matrix(self) -> np.ndarray:
        """Rotation matrix whose columns are the box axes."""
        return Rotation.from_rotvec(self.rotation).as_matrix()

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return np.asarray(self.center) + (signs * np.asarray(self.half_extents)) @ self.matrix.T

    def transformed(self, T: np.ndarray) -> "OrientedBox":
        if _is_identity(T):
            return self
        R = T[:3, :3]
        center = R @ np.asarray(self.center) + T[:3, 3]
        rot = Rotation.from_matrix(R @ self.matrix).as_rotvec()
        return OrientedBox(center, self.half_extents, rot)


@dataclass(frozen=True)
class PartNode:
    part_id: int
    semantic_label: str = "part"
    obb: OrientedBox = field(default_factory=OrientedBox)
    joint: JointSpec = field(default_factory=JointSpec)
    state: float = 0.0
    parent_id: Optional[int] = None
    shape_latent: Optional[tuple] = None
    mesh_ref: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "part_id", int(self.part_id))
        object.__setattr__(self, "state", float(self.state))
        if self.parent_id is not None:
            object.__setattr__(self, "parent_id", int(self.parent_id))
        if self.shape_latent is not None:
            lat = np.asarray(self.shape_latent, dtype=np.float64).reshape(-1)
            object.__setattr__(self, "shape_latent", tuple(float(x) for x in lat))

    @property
    def latent_dim(self) -> int:
        return 0 if self.shape_latent is None else len(self.shape_latent)


@dataclass(frozen=True)
class ArticulatedObject:
    """Kinematic tree of parts.

    ``norm_center``/``norm_scale`` record the ingestion normalization
    ``x_normalized = norm_scale * (x_source - norm_center)`` so it can be undone.
    """

    parts: tuple
    root_id: int = 0
    category: str = "object"
    norm_center: tuple = (0.0, 0.0, 0.0)
    norm_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        object.__setattr__(self, "root_id", int(self.root_id))
        object.__setattr__(self, "norm_center", _vec(self.norm_center, 3, "norm_center"))
        object.__setattr__(self, "norm_scale", float(self.norm_scale))

    def __len__(self) -> int:
        return len(self.parts)

    def index_of(self, part_id: int) -> int:
        for i, p in enumerate(self.parts):
            if p.part_id == part_id:
                return i
        raise KeyError(part_id)

    def part(self, part_id: int) -> PartNode:
        return self.parts[self.index_of(part_id)]

    @property
    def states(self) -> np.ndarray:
        return np.array([p.state for p in self.parts], dtype=np.float64)

    def with_states(self, states) -> "ArticulatedObject":
        states = _check_states(self, states, allow_outside=True)
        parts = [dataclasses.replace(p, state=float(s)) for p, s in zip(self.parts, states)]
        return dataclasses.replace(self, parts=tuple(parts))


# ---------------------------------------------------------------------------
# rigid transforms

def _is_identity(T: np.ndarray) -> bool:
    return np.array_equal(T, np.eye(4))


def rotation_about_axis(direction, angle: float) -> np.ndarray:
    """Rodrigues rotation; returns exactly the identity for ``angle == 0``."""
    u = np.asarray(direction, dtype=np.float64)
    K = np.array([[0.0, -u[2], u[1]], [u[2], 0.0, -u[0]], [-u[1], u[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def make_transform(R=None, t=None) -> np.ndarray:
    T = np.eye(4)
    if R is not None:
        T[:3, :3] = R
    if t is not None:
        T[:3, 3] = t
    return T


def invert_transform(T: np.ndarray) -> np.ndarray:
    R = T[:3, :3]
    return make_transform(R.T, -R.T @ T[:3, 3])


def transform_points(T: np.ndarray, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if _is_identity(T):
        return pts.copy()
    return pts @ T[:3, :3].T + T[:3, 3]


# ---------------------------------------------------------------------------
# joint motion

def denormalize_state(joint: JointSpec, s: float) -> float:
    """Map a unit-interval state to radians or meters along the joint's range."""
    if not 0.0 <= s <= 1.0:
        raise RangeError(f"state {s!r} outside [0, 1]")
    if joint.joint_type is JointType.FIXED:
        return 0.0
    lo, hi = joint.motion_limits
    return lo + s * (hi - lo)


def motion_transform(joint: JointSpec, amount: float) -> np.ndarray:
    """Rigid motion for a raw joint displacement (radians or meters)."""
    jt = joint.joint_type
    if jt is JointType.FIXED:
        return np.eye(4)
    u = np.asarray(joint.direction)
    if jt is JointType.PRISMATIC:
        return make_transform(t=amount * u)
    p = np.asarray(joint.origin)
    if jt is JointType.SCREW:
        if joint.screw_pitch == 0.0:
            raise ParameterError("screw joint with zero pitch")
        R = rotation_about_axis(u, amount / joint.screw_pitch)
        return make_transform(R, p - R @ p + amount * u)
    R = rotation_about_axis(u, amount)
    return make_transform(R, p - R @ p)


def joint_transform(joint: JointSpec, s: float) -> np.ndarray:
    if joint.joint_type is JointType.SCREW and joint.screw_pitch == 0.0:
        raise ParameterError("screw joint with zero pitch")
    return motion_transform(joint, denormalize_state(joint, s))


# ---------------------------------------------------------------------------
# tree traversal

def _find_cycle(parent_of: Mapping[int, Optional[int]], start: int) -> list:
    seen = []
    node = start
    while node is not None and node not in seen:
        seen.append(node)
        node = parent_of.get(node)
    if node is None:
        return []
    return seen[seen.index(node):]


def traversal_order(obj: ArticulatedObject) -> list:
    """Indices of ``obj.parts`` in root-first breadth-first order.

    Raises :class:`StructuralError` on cycles, dangling parents or unreachable parts.
    """
    index = {}
    for i, p in enumerate(obj.parts):
        if p.part_id in index:
            raise StructuralError(f"duplicate part id {p.part_id}")
        index[p.part_id] = i
    if obj.root_id not in index:
        raise StructuralError(f"root id {obj.root_id} not among parts")
    children = {pid: [] for pid in index}
    for p in obj.parts:
        if p.part_id == obj.root_id:
            continue
        if p.parent_id is None:
            raise StructuralError(f"part {p.part_id} has no parent but is not the root")
        if p.parent_id not in index:
            raise StructuralError(f"part {p.part_id} references missing parent {p.parent_id}")
        children[p.parent_id].append(p.part_id)
    order = []
    queue = deque([obj.root_id])
    visited = set()
    while queue:
        pid = queue.popleft()
        visited.add(pid)
        order.append(index[pid])
        queue.extend(children[pid])
    if len(visited) != len(obj.parts):
        parent_of = {p.part_id: (None if p.part_id == obj.root_id else p.parent_id) for p in obj.parts}
        for p in obj.parts:
            if p.part_id not in visited:
                cycle = _find_cycle(parent_of, p.part_id)
                if cycle:
                    path = " -> ".join(str(c) for c in cycle + [cycle[0]])
                    raise StructuralError(f"cycle in parent links: {path}")
        raise StructuralError("parts unreachable from root")
    return order


def _check_states(obj: ArticulatedObject, states, allow_outside=False) -> np.ndarray:
    s = np.asarray(states, dtype=np.float64).reshape(-1)
    if s.shape[0] != len(obj.parts):
        raise ShapeError(f"expected {len(obj.parts)} states, got {s.shape[0]}")
    if not allow_outside and (np.any(s < 0.0) or np.any(s > 1.0)):
        raise RangeError("states must lie in [0, 1]")
    return s


def forward_kinematics_amounts(obj: ArticulatedObject, amounts) -> list:
    """World transforms for raw per-part joint displacements (no range mapping)."""
    amounts = np.asarray(amounts, dtype=np.float64).reshape(-1)
    if amounts.shape[0] != len(obj.parts):
        raise ShapeError(f"expected {len(obj.parts)} joint values, got {amounts.shape[0]}")
    order = traversal_order(obj)
    index = {p.part_id: i for i, p in enumerate(obj.parts)}
    world = [None] * len(obj.parts)
    for i in order:
        p = obj.parts[i]
        if p.part_id == obj.root_id:
            world[i] = np.eye(4)
            continue
        local = motion_transform(p.joint, float(amounts[i]))
        parent = world[index[p.parent_id]]
        world[i] = local if _is_identity(parent) else parent @ local
    return world


def forward_kinematics(obj: ArticulatedObject, states=None) -> list:
    """Per-part world transforms, aligned with ``obj.parts``.

    The root is always the identity; every other part composes its parent's
    world transform with its own joint motion.  ``states`` defaults to the
    object's stored states.
    """
    s = _check_states(obj, obj.states if states is None else states)
    amounts = [denormalize_state(p.joint, float(si)) for p, si in zip(obj.parts, s)]
    for p in obj.parts:
        if p.joint.joint_type is JointType.SCREW and p.joint.screw_pitch == 0.0:
            raise ParameterError(f"part {p.part_id}: screw joint with zero pitch")
    return forward_kinematics_amounts(obj, amounts)


@dataclass
class PosedInstance:
    """World-space geometry of an object at one articulation state."""

    part_ids: list
    states: np.ndarray
    transforms: list
    obbs: list
    meshes: dict  # part position -> posed mesh

    def __len__(self):
        return len(self.part_ids)


def pose_object(obj: ArticulatedObject, states=None, meshes: Optional[Mapping] = None) -> PosedInstance:
    s = _check_states(obj, obj.states if states is None else states)
    transforms = forward_kinematics(obj, s)
    obbs = [p.obb.transformed(T) for p, T in zip(obj.parts, transforms)]
    posed_meshes = {}
    if meshes is not None:
        for i, (p, T) in enumerate(zip(obj.parts, transforms)):
            if p.mesh_ref is None:
                continue
            if p.mesh_ref not in meshes:
                raise MeshLookupError(f"part {p.part_id}: mesh {p.mesh_ref!r} not in store")
            mesh = meshes[p.mesh_ref]
            posed_meshes[i] = mesh if _is_identity(T) else mesh.transformed(T)
    return PosedInstance([p.part_id for p in obj.parts], s, transforms, obbs, posed_meshes)


# ---------------------------------------------------------------------------
# validation

@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    part_id: Optional[int] = None

    def __str__(self):
        where = "" if self.part_id is None else f"part {self.part_id}: "
        return f"[{self.code}] {where}{self.message}"


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> set:
        return {v.code for v in self.violations}

    def add(self, code, message, part_id=None):
        self.violations.append(Violation(code, message, part_id))

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __str__(self):
        if self.ok:
            return "valid"
        return "\n".join(str(v) for v in self.violations)


def validate_object(obj: ArticulatedObject) -> ValidationReport:
    """Check every representation invariant; never raises."""
    report = ValidationReport()
    ids = [p.part_id for p in obj.parts]
    if not ids:
        report.add("empty", "object has no parts")
        return report
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        report.add("duplicate-id", f"duplicate part ids {dup}")
    elif sorted(ids) != list(range(len(ids))):
        report.add("sparse-ids", f"part ids must be dense in [0, {len(ids)})")
    if obj.root_id not in ids:
        report.add("missing-root", f"root id {obj.root_id} not among parts")

    id_set = set(ids)
    latent_dims = set()
    for p in obj.parts:
        j = p.joint
        if p.part_id == obj.root_id:
            if p.parent_id is not None:
                report.add("root-parent", "root part must not have a parent", p.part_id)
            if j.joint_type is not JointType.FIXED:
                report.add("root-joint", "root part must use a fixed joint", p.part_id)
        elif p.parent_id is None:
            report.add("missing-parent", "non-root part without parent", p.part_id)
        elif p.parent_id not in id_set:
            report.add("missing-parent", f"parent {p.parent_id} does not exist", p.part_id)
        elif p.parent_id == p.part_id:
            report.add("cycle", "part is its own parent", p.part_id)

        norm = math.sqrt(sum(d * d for d in j.direction))
        if abs(norm - 1.0) > 1e-9:
            report.add("axis-norm", f"axis direction norm {norm}", p.part_id)
        r = j.range
        if not (r[0] <= r[1]):
            report.add("range-order", f"rotation range [{r[0]}, {r[1]}] is not ordered", p.part_id)
        if not (r[2] <= r[3]):
            report.add("range-order", f"translation range [{r[2]}, {r[3]}] is not ordered", p.part_id)
        if j.joint_type.is_rotational and (r[2] != 0.0 or r[3] != 0.0):
            report.add("range-unused", "rotational joint with nonzero translation range", p.part_id)
        if j.joint_type.is_translational and (r[0] != 0.0 or r[1] != 0.0):
            report.add("range-unused", "translational joint with nonzero rotation range", p.part_id)
        if j.joint_type is JointType.SCREW and j.screw_pitch == 0.0:
            report.add("pitch", "screw joint with zero pitch", p.part_id)
        if not all(math.isfinite(x) for x in (*j.origin, *r, p.state, *p.obb.center, *p.obb.rotation)):
            report.add("non-finite", "non-finite attribute", p.part_id)
        if not 0.0 <= p.state <= 1.0:
            report.add("state-range", f"state {p.state} outside [0, 1]", p.part_id)
        if any(h <= 0 for h in p.obb.half_extents):
            report.add("half-extent", "non-positive half extent", p.part_id)
        elif any(h <= MIN_HALF_EXTENT for h in p.obb.half_extents):
            report.warnings.append(f"part {p.part_id}: degenerate OBB clamped to {MIN_HALF_EXTENT}")
        latent_dims.add(p.latent_dim)
    if len(latent_dims) > 1:
        report.add("latent-dim", f"inconsistent shape latent sizes {sorted(latent_dims)}")

    if not report.codes() & {"duplicate-id", "missing-root", "missing-parent", "cycle", "root-parent"}:
        try:
            traversal_order(obj)
        except StructuralError as exc:
            code = "cycle" if "cycle" in str(exc) else "disconnected"
            report.add(code, str(exc))
    elif "missing-root" not in report.codes() and "duplicate-id" not in report.codes():
        # a cycle may still hide behind other parent problems
        parent_of = {p.part_id: p.parent_id for p in obj.parts if p.part_id != obj.root_id}
        for pid in parent_of:
            cyc = _find_cycle(parent_of, pid)
            if len(cyc) > 1 and "cycle" not in report.codes():
                report.add("cycle", "cycle in parent links: " + " -> ".join(map(str, cyc + [cyc[0]])))
    return report


# ---------------------------------------------------------------------------
# attribute vectors

def attribute_dim(latent_dim: int = 0) -> int:
    return BASE_ATTRIBUTE_DIM + latent_dim


def attributes_to_vector(part: PartNode) -> np.ndarray:
    """Pack ``b | l | r | s | f`` into a flat ``20 + F`` vector."""
    parts = [
        part.obb.center, part.obb.half_extents, part.obb.rotation,
        part.joint.origin, part.joint.direction, part.joint.range, (part.state,),
    ]
    if part.shape_latent is not None:
        parts.append(part.shape_latent)
    return np.array([x for group in parts for x in group], dtype=np.float64)


def vector_to_attributes(
    v,
    joint_type,
    *,
    part_id: int = 0,
    label: str = "part",
    parent_id: Optional[int] = None,
    screw_pitch: float = DEFAULT_SCREW_PITCH,
    mesh_ref: Optional[str] = None,
) -> PartNode:
    """Inverse of :func:`attributes_to_vector`.

    Categorical data (joint type, label, tree links) is not part of the vector
    and has to be supplied by the caller.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] < BASE_ATTRIBUTE_DIM:
        raise ShapeError(f"attribute vector must be 1-D with at least {BASE_ATTRIBUTE_DIM} entries")
    obb = OrientedBox(v[SLICE_CENTER], v[SLICE_HALF_EXTENTS], v[SLICE_ROTATION])
    joint = JointSpec(v[SLICE_AXIS_ORIGIN], v[SLICE_AXIS_DIRECTION], joint_type, v[SLICE_RANGE], screw_pitch)
    latent = v[SLICE_LATENT]
    return PartNode(
        part_id=part_id,
        semantic_label=label,
        obb=obb,
        joint=joint,
        state=float(v[INDEX_STATE]),
        parent_id=parent_id,
        shape_latent=tuple(latent) if latent.size else None,
        mesh_ref=mesh_ref,
    )


def object_to_matrix(obj: ArticulatedObject) -> np.ndarray:
    """Stack the attribute vectors of all parts, one row per part."""
    return np.stack([attributes_to_vector(p) for p in obj.parts])


# ---------------------------------------------------------------------------
# sampling & reordering

STATE_STRATEGIES = ("uniform", "stratified", "endpoints")


def sample_states(obj: ArticulatedObject, M: int, seed: int = 0, strategy: str = "uniform") -> np.ndarray:
    """Monte Carlo draw of ``M`` state vectors, shape ``(M, n_parts)``.

    ``stratified`` jitters each joint inside ``M`` strata of width ``1/M`` with an
    independent strata permutation per joint.  ``endpoints`` puts the all-zero
    and all-one vectors first and fills the rest uniformly (``M == 1`` yields
    only the all-zero vector).
    """
    if int(M) != M or M < 1:
        raise ParameterError(f"sample count must be >= 1, got {M}")
    M = int(M)
    n = len(obj.parts)
    rng = np.random.default_rng(seed)
    if strategy == "uniform":
        return rng.random((M, n))
    if strategy == "stratified":
        out = np.empty((M, n))
        for j in range(n):
            out[:, j] = (rng.permutation(M) + rng.random(M)) / M
        return out
    if strategy == "endpoints":
        out = np.empty((M, n))
        out[0] = 0.0
        if M > 1:
            out[1] = 1.0
        if M > 2:
            out[2:] = rng.random((M - 2, n))
        return out
    raise ParameterError(f"unknown sampling strategy {strategy!r}; expected one of {STATE_STRATEGIES}")


def permute_parts(obj: ArticulatedObject, perm: Sequence[int]) -> ArticulatedObject:
    """Reorder parts so that new position ``j`` holds old part ``perm[j]``.

    Part ids are reassigned to the new positions and parent ids remapped, so the
    result is the same tree up to relabeling.
    """
    perm = [int(i) for i in perm]
    if sorted(perm) != list(range(len(obj.parts))):
        raise ParameterError("perm must be a permutation of part positions")
    new_id = {obj.parts[old].part_id: new for new, old in enumerate(perm)}
    parts = []
    for new, old in enumerate(perm):
        p = obj.parts[old]
        parent = None if p.parent_id is None else new_id.get(p.parent_id, p.parent_id)
        parts.append(dataclasses.replace(p, part_id=new, parent_id=parent))
    return dataclasses.replace(obj, parts=tuple(parts), root_id=new_id[obj.root_id])


def shuffle_parts(obj: ArticulatedObject, seed: int = 0, return_permutation: bool = False):
    perm = np.random.default_rng(seed).permutation(len(obj.parts))
    out = permute_parts(obj, perm)
    return (out, perm) if return_permutation else out


def inverse_permutation(perm: Iterable[int]) -> np.ndarray:
    perm = np.asarray(list(perm))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def posed_object(obj: ArticulatedObject, states) -> ArticulatedObject:
    """The object re-expressed at ``states``: boxes move with their part, joint
    axes with the parent part, and each part records its state."""
    s = _check_states(obj, states)
    W = forward_kinematics(obj, s)
    parts = []
    for i, p in enumerate(obj.parts):
        Wp = np.eye(4) if p.parent_id is None else W[obj.index_of(p.parent_id)]
        joint = p.joint
        if not _is_identity(Wp):
            joint = dataclasses.replace(
                joint,
                origin=transform_points(Wp, np.asarray(joint.origin)[None])[0],
                direction=Wp[:3, :3] @ np.asarray(joint.direction),
            )
        parts.append(dataclasses.replace(p, obb=p.obb.transformed(W[i]), joint=joint, state=float(s[i])))
    return dataclasses.replace(obj, parts=tuple(parts))
