"""Mesh and point-cloud primitives: sampling, OBB fitting, chamfer, voxels, POR."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.spatial.transform import Rotation

from .core import MIN_HALF_EXTENT, OrientedBox, PosedInstance
from .errors import GeometryError, ParameterError, ShapeError

log = logging.getLogger(__name__)

RAY_DIRECTION = (1.0, 1e-4, 1e-4)
# used only for points whose primary ray grazes an edge or vertex
_FALLBACK_DIRECTIONS = ((1.0, 1.3e-4, 0.7e-4), (1.0, -0.9e-4, 1.7e-4), (0.8, 0.35, 0.11))
_GRAZE_EPS = 1e-9
_CHUNK = 4_000_000


class DegenerateMeshWarning(UserWarning):
    pass


@dataclass(eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ShapeError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ShapeError("face references fewer than 3 distinct vertices")

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas().sum())

    def bounds(self):
        if len(self.vertices) == 0:
            raise GeometryError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, T: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices @ T[:3, :3].T + T[:3, 3], self.faces.copy())

    def is_watertight(self) -> bool:
        if len(self.faces) == 0:
            return True
        f = self.faces
        edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        edges.sort(axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def __eq__(self, other):
        if not isinstance(other, TriMesh):
            return NotImplemented
        return np.array_equal(self.vertices, other.vertices) and np.array_equal(self.faces, other.faces)


def merge_meshes(meshes) -> TriMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    if not verts:
        return TriMesh.empty()
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


_BOX_CORNERS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
    dtype=np.float64,
)
# outward-facing, counter-clockwise
_BOX_FACES = np.array(
    [
        [0, 3, 2], [0, 2, 1],  # z = 0
        [4, 5, 6], [4, 6, 7],  # z = 1
        [0, 1, 5], [0, 5, 4],  # y = 0
        [3, 7, 6], [3, 6, 2],  # y = 1
        [0, 4, 7], [0, 7, 3],  # x = 0
        [1, 2, 6], [1, 6, 5],  # x = 1
    ],
    dtype=np.int64,
)


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)) -> TriMesh:
    """Axis-aligned box with 8 vertices and 12 triangles."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return TriMesh(lo + _BOX_CORNERS * (hi - lo), _BOX_FACES.copy())


def obb_mesh(obb: OrientedBox) -> TriMesh:
    h = np.asarray(obb.half_extents)
    local = box_mesh(-h, h)
    return TriMesh(local.vertices @ obb.matrix.T + np.asarray(obb.center), local.faces)


# ---------------------------------------------------------------------------
# sampling

def sample_surface_points(mesh: TriMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the surface, shape ``(n, 3)``."""
    if n < 0:
        raise ParameterError("sample count must be non-negative")
    areas = mesh.face_areas() if len(mesh.faces) else np.zeros(0)
    total = float(areas.sum())
    if not total > 0.0:
        raise GeometryError("mesh has no face with positive area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(areas), size=n, p=areas / total)
    r1, r2 = rng.random((2, n))
    sq = np.sqrt(r1)
    tri = mesh.triangles[idx]
    return (
        (1.0 - sq)[:, None] * tri[:, 0]
        + (sq * (1.0 - r2))[:, None] * tri[:, 1]
        + (sq * r2)[:, None] * tri[:, 2]
    )


# ---------------------------------------------------------------------------
# oriented bounding boxes

def _min_area_direction(pts2d: np.ndarray) -> Optional[np.ndarray]:
    """Edge direction of the minimum-area enclosing rectangle (rotating calipers)."""
    try:
        hull = ConvexHull(pts2d)
    except (QhullError, ValueError):
        return None
    hp = pts2d[hull.vertices]
    edges = np.roll(hp, -1, axis=0) - hp
    lengths = np.linalg.norm(edges, axis=1)
    edges = edges[lengths > 0] / lengths[lengths > 0, None]
    best, best_area = None, np.inf
    for e in edges:
        n = np.array([-e[1], e[0]])
        a = hp @ e
        b = hp @ n
        area = (a.max() - a.min()) * (b.max() - b.min())
        if area < best_area * (1.0 - 1e-12):
            best, best_area = e, area
    return best


def _plane_basis(n: np.ndarray):
    helper = np.eye(3)[int(np.argmin(np.abs(n)))]
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def _frame_in_plane(P: np.ndarray, n: np.ndarray):
    e1, e2 = _plane_basis(n)
    d = _min_area_direction(np.stack([P @ e1, P @ e2], axis=1))
    if d is None:
        return None
    u = d[0] * e1 + d[1] * e2
    return np.stack([u, np.cross(n, u), n], axis=1)


def _extents(P: np.ndarray, axes: np.ndarray) -> np.ndarray:
    proj = P @ axes
    return proj.max(axis=0) - proj.min(axis=0)


def _refine_degenerate(P: np.ndarray, axes: np.ndarray, rank: int) -> np.ndarray:
    """Minimum-volume frame among hull-face candidates when PCA axes are ambiguous."""
    if rank == 3:
        try:
            hull = ConvexHull(P)
        except (QhullError, ValueError):
            return axes
        eqs = hull.equations[:, :3]
        _, first = np.unique(np.round(eqs, 9), axis=0, return_index=True)
        best, best_vol = axes, float(np.prod(_extents(P, axes)))
        for n in eqs[np.sort(first)]:
            frame = _frame_in_plane(P, n / np.linalg.norm(n))
            if frame is None:
                continue
            vol = float(np.prod(_extents(P, frame)))
            if vol < best_vol * (1.0 - 1e-9):
                best, best_vol = frame, vol
        return best
    if rank == 2:
        frame = _frame_in_plane(P, axes[:, 2])
        return axes if frame is None else frame
    return axes


def _canonical_axes(axes: np.ndarray) -> np.ndarray:
    axes = axes.copy()
    for k in range(2):
        col = axes[:, k]
        if col[int(np.argmax(np.abs(col)))] < 0:
            axes[:, k] = -col
    axes[:, 2] = np.cross(axes[:, 0], axes[:, 1])
    return axes


def fit_obb(points) -> OrientedBox:
    """PCA oriented bounding box.

    Axes are the covariance eigenvectors ordered by decreasing variance.  When
    eigenvalues coincide (cubes, squares, spheres) the eigenvectors are not
    determined by the data, so the frame is picked among convex-hull face
    orientations by minimum volume instead.  Sign convention: the
    largest-magnitude component of the first two axes is positive, the third
    axis completes a right-handed frame.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise ParameterError("cannot fit a box to an empty point cloud")
    mean = P.mean(axis=0)
    X = P - mean
    cov = X.T @ X / len(P)
    evals, evecs = np.linalg.eigh(cov)
    evals, axes = evals[::-1], evecs[:, ::-1]
    top = max(float(evals[0]), 0.0)
    if top > 0.0:
        rank = int(np.sum(evals > 1e-12 * top))
        gaps = np.abs(np.diff(evals[:rank])) if rank > 1 else np.zeros(0)
        if np.any(gaps <= 1e-8 * top):
            axes = _refine_degenerate(X, axes, rank)
            ext = _extents(X, axes)
            # equal extents: keep the axis closest to the lower world axis first
            rounded = np.round(ext / max(float(ext.max()), 1e-300), 9)
            dominant = np.argmax(np.abs(axes), axis=0)
            axes = axes[:, np.lexsort((dominant, -rounded))]
    axes = _canonical_axes(axes)
    proj = X @ axes
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    center = mean + axes @ ((lo + hi) / 2.0)
    half = np.maximum((hi - lo) / 2.0, MIN_HALF_EXTENT)
    return OrientedBox(center, half, Rotation.from_matrix(axes).as_rotvec() + 0.0)


# ---------------------------------------------------------------------------
# chamfer

def _nearest_sq(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    tree = cKDTree(B)
    k = min(8, len(B))
    _, idx = tree.query(A, k=k)
    if k == 1:
        idx = idx[:, None]
    # recompute on the candidates so the value is bit-identical to a dense search
    d2 = ((A[:, None, :] - B[idx]) ** 2).sum(axis=-1)
    return d2.min(axis=1)


def chamfer_distance(P, Q) -> float:
    """Symmetric chamfer: mean squared NN distance P->Q plus Q->P."""
    P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(Q, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or len(Q) == 0:
        raise ParameterError("chamfer distance needs two non-empty clouds")
    return float(_nearest_sq(P, Q).mean()) + float(_nearest_sq(Q, P).mean())


# ---------------------------------------------------------------------------
# voxels

@dataclass(eq=False)
class VoxelGrid:
    origin: np.ndarray
    cell_size: float
    occupancy: np.ndarray
    watertight: bool = True
    warnings: list = field(default_factory=list)

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def occupied_volume(self) -> float:
        return float(self.occupancy.sum()) * self.cell_size ** 3

    def cell_centers(self) -> np.ndarray:
        return _cell_centers(self.origin, self.cell_size, self.resolution)


def _cell_centers(origin, cell, R) -> np.ndarray:
    c = (np.arange(R) + 0.5) * cell
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + np.asarray(origin)


def _ray_crossings(mesh: TriMesh, pts: np.ndarray, direction):
    """Per-point crossing parity and a flag for rays that graze an edge."""
    d = np.asarray(direction, dtype=np.float64)
    tri = mesh.triangles
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-300
    v0, e1, e2, pvec, det = v0[ok], e1[ok], e2[ok], pvec[ok], det[ok]
    qd = np.cross(e1, d)      # v numerator  = tvec . (e1 x d)
    qn = np.cross(e1, e2)     # t numerator  = tvec . (e1 x e2)
    cu = np.einsum("ij,ij->i", v0, pvec)
    cv = np.einsum("ij,ij->i", v0, qd)
    ct = np.einsum("ij,ij->i", v0, qn)
    parity = np.zeros(len(pts), dtype=bool)
    grazing = np.zeros(len(pts), dtype=bool)
    if len(det) == 0:
        return parity, grazing
    step = max(1, _CHUNK // len(det))
    for s in range(0, len(pts), step):
        o = pts[s:s + step]
        u = (o @ pvec.T - cu) / det
        v = (o @ qd.T - cv) / det
        t = (o @ qn.T - ct) / det
        w = 1.0 - u - v
        hit = (u >= 0) & (v >= 0) & (w >= 0) & (t > 0)
        parity[s:s + step] = (hit.sum(axis=1) % 2) == 1
        near = (np.minimum(np.minimum(u, v), w) > -_GRAZE_EPS) & (t > -_GRAZE_EPS)
        edge = near & ((np.minimum(np.minimum(u, v), w) < _GRAZE_EPS) | (np.abs(t) < _GRAZE_EPS))
        grazing[s:s + step] = edge.any(axis=1)
    return parity, grazing


def points_inside_mesh(mesh: TriMesh, points) -> np.ndarray:
    """Ray-parity containment along a fixed, slightly jittered +x direction."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    if len(mesh.faces) == 0 or len(pts) == 0:
        return inside
    inside, grazing = _ray_crossings(mesh, pts, RAY_DIRECTION)
    pending = np.flatnonzero(grazing)
    for direction in _FALLBACK_DIRECTIONS:
        if len(pending) == 0:
            break
        par, graz = _ray_crossings(mesh, pts[pending], direction)
        inside[pending] = par
        pending = pending[graz]
    return inside


def voxel_occupancy(mesh: TriMesh, resolution: int, bounds) -> VoxelGrid:
    """Dense R^3 occupancy: a cell is set iff its center is inside the mesh.

    ``bounds`` is ``(lo, hi)``; cells are cubic with edge ``max(hi - lo) / R``
    starting at ``lo``.
    """
    R = int(resolution)
    if R < 1:
        raise ParameterError("resolution must be >= 1")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    cell = float(np.max(hi - lo)) / R
    if not cell > 0:
        raise ParameterError("bounds must have positive extent")
    occ = np.zeros((R, R, R), dtype=bool)
    grid = VoxelGrid(lo, cell, occ)
    if len(mesh.faces) == 0:
        return grid
    if not mesh.is_watertight():
        grid.watertight = False
        msg = "mesh is not watertight; ray-parity occupancy is approximate"
        grid.warnings.append(msg)
        warnings.warn(msg, DegenerateMeshWarning, stacklevel=2)
    mlo, mhi = mesh.bounds()
    c = (np.arange(R) + 0.5) * cell
    sel = [np.flatnonzero((lo[k] + c >= mlo[k]) & (lo[k] + c <= mhi[k])) for k in range(3)]
    if any(len(s) == 0 for s in sel):
        return grid
    gx, gy, gz = np.meshgrid(*sel, indexing="ij")
    idx = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    centers = lo + (idx + 0.5) * cell
    inside = points_inside_mesh(mesh, centers)
    occ[idx[inside, 0], idx[inside, 1], idx[inside, 2]] = True
    return grid


def part_geometry(posed: PosedInstance, use_obb_fallback: bool = True) -> list:
    """One world-space mesh per part; parts without a mesh use their posed OBB."""
    out = []
    for i in range(len(posed)):
        if i in posed.meshes:
            out.append(posed.meshes[i])
        elif use_obb_fallback:
            out.append(obb_mesh(posed.obbs[i]))
        else:
            out.append(TriMesh.empty())
    return out


def part_overlap_rate(posed: PosedInstance, resolution: int = 64, use_obb_fallback: bool = True) -> float:
    """Pairwise interpenetration volume over total part volume, on a shared grid.

    The grid spans the union AABB of all parts padded by 5% of its extent on
    every side.
    """
    meshes = [m for m in part_geometry(posed, use_obb_fallback) if len(m.faces)]
    if not meshes or sum(m.area for m in meshes) <= 0.0:
        raise ParameterError("no part geometry to voxelize")
    verts = np.concatenate([m.vertices for m in meshes])
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    pad = 0.05 * (hi - lo)
    pad = np.where(pad > 0, pad, 0.05 * max(float(np.max(hi - lo)), 1e-9))
    bounds = (lo - pad, hi + pad)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMeshWarning)
        occ = [voxel_occupancy(m, resolution, bounds).occupancy for m in meshes]
    total = sum(int(o.sum()) for o in occ)
    if total == 0:
        raise ParameterError("all parts voxelize to empty occupancy")
    overlap = 0
    for i in range(len(occ)):
        for j in range(i + 1, len(occ)):
            overlap += int(np.count_nonzero(occ[i] & occ[j]))
    return overlap / total
