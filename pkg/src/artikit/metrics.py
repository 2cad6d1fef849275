"""Articulation-aware set metrics: Instantiation Distance, MMD, COV, 1-NNA and POR.

Objects enter as ``(object, meshes)`` pairs or bare objects; parts without a
mesh contribute their OBB box surface.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ArticulatedObject, forward_kinematics, pose_object, sample_states, transform_points
from .errors import ParameterError, ShapeError
from .geometry import chamfer_distance, obb_mesh, part_overlap_rate, sample_surface_points

log = logging.getLogger(__name__)

_IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

CONVENTION_NOTES = (
    "chamfer: mean squared nearest-neighbour distance, both directions summed",
    "mmd: mean over reference objects of the minimum distance to any generated object",
    "cov: fraction of reference objects that are some generated object's nearest reference (ties to lowest index)",
    "1-nna: leave-one-out 1-NN accuracy on the pooled sets, distance ties resolved toward the opposite set",
    "por: pairwise voxel overlap over total occupied voxels; por_mean averages the rest pose and M sampled poses",
    "por_scaled_e2: por_mean * 100",
)


def yaw_orientations() -> tuple:
    """Rotations about z by 0, 90, 180 and 270 degrees (exact entries)."""
    c = (1.0, 0.0, -1.0, 0.0)
    s = (0.0, 1.0, 0.0, -1.0)
    return tuple(((c[k], -s[k], 0.0), (s[k], c[k], 0.0), (0.0, 0.0, 1.0)) for k in range(4))


@dataclass(frozen=True)
class IDConfig:
    M: int = 10
    points_per_object: int = 2048
    orientation_set: tuple = (_IDENTITY,)
    seed: int = 0

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise ParameterError(f"M must be >= 1, got {self.M}")
        if int(self.points_per_object) != self.points_per_object or self.points_per_object < 1:
            raise ParameterError(f"points_per_object must be >= 1, got {self.points_per_object}")
        rots = []
        for R in self.orientation_set:
            R = np.asarray(R, dtype=np.float64)
            if R.shape != (3, 3):
                raise ShapeError("orientations must be 3x3 matrices")
            if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
                raise ParameterError("orientations must be proper rotations")
            rots.append(tuple(tuple(float(x) for x in row) for row in R))
        if not rots:
            raise ParameterError("orientation_set must not be empty")
        object.__setattr__(self, "orientation_set", tuple(rots))
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "points_per_object", int(self.points_per_object))
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self) -> dict:
        return {"M": self.M, "points_per_object": self.points_per_object,
                "orientation_set": [list(map(list, R)) for R in self.orientation_set], "seed": self.seed}

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# whole-object clouds

def _unpack(item):
    if isinstance(item, ArticulatedObject):
        return item, None
    obj, meshes = item
    return obj, meshes


def _part_meshes(obj: ArticulatedObject, meshes) -> list:
    out = []
    for p in obj.parts:
        if p.mesh_ref is None:
            out.append(obb_mesh(p.obb))
        elif meshes is None or p.mesh_ref not in meshes:
            raise ParameterError(f"part {p.part_id}: mesh {p.mesh_ref!r} is not available")
        else:
            out.append(meshes[p.mesh_ref])
    return out


def _allocate(areas: np.ndarray, n: int) -> np.ndarray:
    """Integer split of ``n`` proportional to ``areas`` (largest remainder, ties to lower index)."""
    share = n * areas / areas.sum()
    counts = np.floor(share).astype(np.int64)
    rest = n - int(counts.sum())
    order = np.lexsort((np.arange(len(areas)), -(share - counts)))
    counts[order[:rest]] += 1
    return counts


def rest_point_sets(obj: ArticulatedObject, meshes, n: int, seed: int) -> list:
    """Per-part rest-frame surface samples whose sizes sum to ``n``."""
    parts = _part_meshes(obj, meshes)
    areas = np.array([m.area if len(m.faces) else 0.0 for m in parts])
    if not areas.sum() > 0.0:
        raise ParameterError("object has no surface geometry")
    counts = _allocate(areas, n)
    seeds = np.random.SeedSequence(seed).spawn(len(parts))
    return [sample_surface_points(m, int(c), np.random.default_rng(s)) if c else np.zeros((0, 3))
            for m, c, s in zip(parts, counts, seeds)]


def posed_cloud(obj: ArticulatedObject, rest_sets: list, states) -> np.ndarray:
    transforms = forward_kinematics(obj, states)
    return np.concatenate([pts if np.array_equal(T, np.eye(4)) else transform_points(T, pts)
                           for T, pts in zip(transforms, rest_sets)])


def _pose_clouds(item, cfg: IDConfig) -> list:
    obj, meshes = _unpack(item)
    rest = rest_point_sets(obj, meshes, cfg.points_per_object, cfg.seed)
    Q = sample_states(obj, cfg.M, cfg.seed, "uniform")
    return [posed_cloud(obj, rest, q) for q in Q]


def _id_from_clouds(A: list, B: list, rotations: Sequence[np.ndarray]) -> float:
    d = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        rotated = [a if np.array_equal(R, np.eye(3)) else a @ R.T for R in rotations]
        for j, b in enumerate(B):
            d[i, j] = min(chamfer_distance(ra, b) for ra in rotated)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def instantiation_distance(o1, o2, cfg: Optional[IDConfig] = None) -> float:
    """Pose-averaged chamfer distance between two articulated objects.

    Both objects draw ``M`` uniform state vectors and their surface samples
    from ``cfg.seed``, so an object compared with itself scores zero.
    Orientations rotate the first object; the result is symmetric whenever the
    orientation set is closed under inversion (true for the defaults).
    """
    cfg = cfg or IDConfig()
    rotations = [np.asarray(R) for R in cfg.orientation_set]
    return _id_from_clouds(_pose_clouds(o1, cfg), _pose_clouds(o2, cfg), rotations)


# ---------------------------------------------------------------------------
# distance matrices

def object_digest(item) -> str:
    from .io.canonical import dumps_object

    obj, meshes = _unpack(item)
    h = hashlib.sha256(dumps_object(obj).encode("utf-8"))
    for p in obj.parts:
        if p.mesh_ref is not None and meshes is not None and p.mesh_ref in meshes:
            m = meshes[p.mesh_ref]
            h.update(p.mesh_ref.encode("utf-8"))
            h.update(np.ascontiguousarray(m.vertices, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(m.faces, dtype="<i8").tobytes())
    return h.hexdigest()


@dataclass
class DistanceMatrix:
    values: np.ndarray
    config_hash: str
    cache_path: Optional[str] = None

    @property
    def shape(self):
        return self.values.shape


def _cache_key(rows: list, cols: list, cfg: IDConfig) -> str:
    h = hashlib.sha256()
    for tag, digests in (("rows", rows), ("cols", cols)):
        h.update(tag.encode())
        for d in digests:
            h.update(d.encode())
    h.update(cfg.digest().encode())
    return h.hexdigest()


def _write_cache(path: Path, values: np.ndarray) -> bool:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".idmat.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            np.save(fh, values)
        os.replace(tmp, path)
        return True
    except OSError as exc:
        warnings.warn(f"could not write distance cache {path}: {exc}", RuntimeWarning)
        return False


def pairwise_distance_matrix(gen: list, ref: list, cfg: Optional[IDConfig] = None,
                             cache_dir=None) -> DistanceMatrix:
    """Entry ``(i, j)`` is ``instantiation_distance(gen[i], ref[j], cfg)``.

    With ``cache_dir`` the matrix is stored under a SHA-256 of the object
    digests and the configuration, and later identical requests load it.
    """
    cfg = cfg or IDConfig()
    if not gen or not ref:
        raise ParameterError("both object sets must be non-empty")
    rows = [object_digest(g) for g in gen]
    cols = [object_digest(r) for r in ref]
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"idmat-{_cache_key(rows, cols, cfg)}.npy"
        if path.exists():
            try:
                values = np.load(path, allow_pickle=False)
                if values.shape == (len(gen), len(ref)):
                    log.info("cache hit %s", path.name)
                    return DistanceMatrix(values, cfg.digest(), str(path))
            except (OSError, ValueError) as exc:
                log.warning("ignoring unreadable cache %s: %s", path, exc)
    clouds = {}
    for digest, item in list(zip(rows, gen)) + list(zip(cols, ref)):
        if digest not in clouds:
            clouds[digest] = _pose_clouds(item, cfg)
    rotations = [np.asarray(R) for R in cfg.orientation_set]
    # identical objects share clouds, so with the identity available their distance is exactly 0
    has_identity = any(np.array_equal(R, np.eye(3)) for R in rotations)
    values = np.empty((len(gen), len(ref)))
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            if a == b and has_identity:
                values[i, j] = 0.0
            else:
                values[i, j] = _id_from_clouds(clouds[a], clouds[b], rotations)
    if path is not None and not _write_cache(path, values):
        path = None
    return DistanceMatrix(values, cfg.digest(), None if path is None else str(path))


def _values(m) -> np.ndarray:
    v = np.asarray(m.values if isinstance(m, DistanceMatrix) else m, dtype=np.float64)
    if v.ndim != 2 or v.size == 0:
        raise ShapeError(f"expected a non-empty 2-D distance matrix, got shape {v.shape}")
    return v


def mmd(matrix) -> float:
    """Mean over reference columns of the smallest generated-row distance."""
    return float(_values(matrix).min(axis=0).mean())


def coverage(matrix) -> float:
    D = _values(matrix)
    covered = np.unique(np.argmin(D, axis=1))  # argmin picks the lowest index on ties
    return len(covered) / D.shape[1]


def one_nna(gg, gr, rr) -> float:
    """Leave-one-out 1-NN two-sample accuracy; a tie with the other set counts as a miss."""
    gg, gr, rr = _values(gg), _values(gr), _values(rr)
    ng, nr = gr.shape
    if gg.shape != (ng, ng) or rr.shape != (nr, nr):
        raise ShapeError(f"inconsistent shapes gg={gg.shape} gr={gr.shape} rr={rr.shape}")
    correct = 0
    for i in range(ng):
        same = np.delete(gg[i], i)
        if same.size and same.min() < gr[i].min():
            correct += 1
    for j in range(nr):
        same = np.delete(rr[j], j)
        if same.size and same.min() < gr[:, j].min():
            correct += 1
    return correct / (ng + nr)


# ---------------------------------------------------------------------------
# reports

def por_profile(item, cfg: IDConfig, resolution: int = 64) -> tuple:
    """(rest-pose POR, mean POR over the rest pose plus ``M`` sampled poses)."""
    obj, meshes = _unpack(item)
    zero = np.zeros(len(obj.parts))
    values = [part_overlap_rate(pose_object(obj, zero, meshes), resolution)]
    for q in sample_states(obj, cfg.M, cfg.seed, "uniform"):
        values.append(part_overlap_rate(pose_object(obj, q, meshes), resolution))
    return values[0], float(np.mean(values))


@dataclass
class MetricsReport:
    mmd: float
    cov: float
    one_nna: float
    por_mean: float
    por_scaled_e2: float
    por_rest_mean: float
    config_hash: str
    n_gen: int
    n_ref: int
    config: dict = field(default_factory=dict)
    matrix_ref: Optional[str] = None
    convention_notes: list = field(default_factory=lambda: list(CONVENTION_NOTES))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown report fields {sorted(unknown)}")
        return cls(**d)

    def summary_line(self) -> str:
        return (f"POR {self.por_mean:.6g} MMD {self.mmd:.6g} "
                f"COV {self.cov:.6g} 1-NNA {self.one_nna:.6g}")

    def save(self, path) -> None:
        from .io.canonical import atomic_write_text

        atomic_write_text(path, json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))


def evaluate_sets(gen: list, ref: list, cfg: Optional[IDConfig] = None, por_resolution: int = 64,
                  cache_dir=None) -> MetricsReport:
    cfg = cfg or IDConfig()
    if not gen or not ref:
        raise ParameterError("both object sets must be non-empty")
    gr = pairwise_distance_matrix(gen, ref, cfg, cache_dir)
    gg = pairwise_distance_matrix(gen, gen, cfg, cache_dir)
    rr = pairwise_distance_matrix(ref, ref, cfg, cache_dir)
    por = [por_profile(g, cfg, por_resolution) for g in gen]
    por_mean = float(np.mean([p[1] for p in por]))
    return MetricsReport(
        mmd=mmd(gr),
        cov=coverage(gr),
        one_nna=one_nna(gg, gr, rr),
        por_mean=por_mean,
        por_scaled_e2=por_mean * 100.0,
        por_rest_mean=float(np.mean([p[0] for p in por])),
        config_hash=cfg.digest(),
        n_gen=len(gen),
        n_ref=len(ref),
        config={**cfg.to_dict(), "por_resolution": int(por_resolution)},
        matrix_ref=gr.cache_path,
    )
