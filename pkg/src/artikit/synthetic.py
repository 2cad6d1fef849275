"""Small deterministic object sets used for training demos, tests and the CLI.

Every object is built from boxes so that meshes, OBBs and joints agree
exactly.  Coordinates live in the normalized unit cube.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

from .core import ArticulatedObject, JointSpec, JointType, OrientedBox, PartNode
from .geometry import box_mesh, obb_mesh

# (label, lo, hi, parent, joint type, axis origin, axis direction, range)
_F = JointType.FIXED
_R = JointType.REVOLUTE
_C = JointType.CONTINUOUS
_P = JointType.PRISMATIC
_S = JointType.SCREW
_Z = (0.0, 0.0, 1.0)
_X = (1.0, 0.0, 0.0)
_Y = (0.0, 1.0, 0.0)
_HALF_PI = math.pi / 2

_CATALOG = {
    "cabinet": [
        ("body", (-0.3, -0.3, -0.5), (0.3, 0.3, 0.5), None, _F, (0, 0, 0), _Z, (0, 0, 0, 0)),
        ("door", (-0.3, 0.3, -0.5), (0.3, 0.34, 0.5), 0, _R, (0.3, 0.32, 0), _Z, (0, _HALF_PI, 0, 0)),
    ],
    "drawer_chest": [
        ("body", (-0.4, -0.3, -0.4), (0.4, 0.3, 0.4), None, _F, (0, 0, 0), _Z, (0, 0, 0, 0)),
        ("drawer", (-0.35, 0.3, 0.05), (0.35, 0.34, 0.35), 0, _P, (0, 0.3, 0.2), _Y, (0, 0, 0, 0.4)),
        ("drawer", (-0.35, 0.3, -0.35), (0.35, 0.34, -0.05), 0, _P, (0, 0.3, -0.2), _Y, (0, 0, 0, 0.4)),
    ],
    "laptop": [
        ("base", (-0.4, -0.3, -0.02), (0.4, 0.3, 0.02), None, _F, (0, 0, 0), _Z, (0, 0, 0, 0)),
        ("lid", (-0.4, -0.3, 0.02), (0.4, 0.3, 0.05), 0, _R, (0, -0.3, 0.02), _X, (0, 2.0, 0, 0)),
    ],
    "bottle": [
        ("body", (-0.15, -0.15, -0.5), (0.15, 0.15, 0.3), None, _F, (0, 0, 0), _Z, (0, 0, 0, 0)),
        ("cap", (-0.08, -0.08, 0.3), (0.08, 0.08, 0.42), 0, _S, (0, 0, 0.3), _Z, (0, 0, 0, 0.06)),
    ],
    "faucet": [
        ("base", (-0.1, -0.1, -0.5), (0.1, 0.1, 0.1), None, _F, (0, 0, 0), _Z, (0, 0, 0, 0)),
        ("spout", (-0.05, 0.0, 0.05), (0.05, 0.45, 0.12), 0, _F, (0, 0, 0.1), _Z, (0, 0, 0, 0)),
        ("handle", (-0.03, -0.03, 0.1), (0.03, 0.25, 0.14), 0, _C, (0, 0, 0.1), _Z, (-math.pi, math.pi, 0, 0)),
    ],
    "microwave": [
        ("body", (-0.5, -0.3, -0.3), (0.5, 0.3, 0.3), None, _F, (0, 0, 0), _Z, (0, 0, 0, 0)),
        ("door", (-0.5, 0.3, -0.3), (0.2, 0.33, 0.3), 0, _R, (-0.5, 0.3, 0), _Z, (-_HALF_PI, 0, 0, 0)),
        ("button", (0.3, 0.3, -0.1), (0.4, 0.33, 0.0), 0, _P, (0.35, 0.3, -0.05), _Y, (0, 0, -0.02, 0)),
    ],
    "lamp": [
        ("base", (-0.2, -0.2, -0.5), (0.2, 0.2, -0.44), None, _F, (0, 0, 0), _Z, (0, 0, 0, 0)),
        ("arm", (-0.03, -0.03, -0.44), (0.03, 0.03, 0.2), 0, _C, (0, 0, -0.44), _Z, (-math.pi, math.pi, 0, 0)),
        ("upper_arm", (-0.03, -0.03, 0.2), (0.03, 0.4, 0.26), 1, _R, (0, 0, 0.23), _X, (-0.5, 0.5, 0, 0)),
        ("shade", (-0.1, 0.3, 0.1), (0.1, 0.5, 0.2), 2, _R, (0, 0.4, 0.2), _X, (-0.8, 0.3, 0, 0)),
    ],
    "washer": [
        ("body", (-0.35, -0.35, -0.45), (0.35, 0.35, 0.45), None, _F, (0, 0, 0), _Z, (0, 0, 0, 0)),
        ("door", (-0.25, 0.35, -0.25), (0.25, 0.39, 0.15), 0, _R, (-0.25, 0.37, 0), _Z, (0, 1.8, 0, 0)),
        ("knob", (0.15, 0.35, 0.3), (0.25, 0.39, 0.4), 0, _C, (0.2, 0.35, 0.35), _Y, (-math.pi, math.pi, 0, 0)),
        ("tray", (-0.3, 0.25, 0.3), (0.0, 0.35, 0.4), 0, _P, (-0.15, 0.35, 0.35), _Y, (0, 0, 0, 0.2)),
    ],
}

CATEGORIES = tuple(_CATALOG)


def _build(category: str) -> tuple:
    parts, meshes = [], {}
    for i, (label, lo, hi, parent, jt, origin, direction, rng) in enumerate(_CATALOG[category]):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        ref = f"meshes/{category}_{i}.obj"
        meshes[ref] = box_mesh(lo, hi)
        parts.append(PartNode(
            part_id=i,
            semantic_label=label,
            obb=OrientedBox((lo + hi) / 2, (hi - lo) / 2, (0.0, 0.0, 0.0)),
            joint=JointSpec(origin, direction, jt, rng),
            state=0.0,
            parent_id=parent,
            mesh_ref=ref,
        ))
    return ArticulatedObject(parts, 0, category), meshes


def toy_dataset() -> list:
    """The eight bundled objects as ``(object, meshes)`` pairs, 2 to 4 parts each."""
    return [_build(c) for c in CATEGORIES]


def condition_tokens(key: str, n_tokens: int = 4, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Stand-in encoder output: a fixed pseudo-random token set per key."""
    digest = hashlib.sha256(f"{seed}:{key}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    tokens = rng.standard_normal((n_tokens, dim)) / math.sqrt(dim)
    # float32-representable so the tokens survive a feature-file round trip unchanged
    return tokens.astype(np.float32).astype(np.float64)


def random_object(seed: int, max_parts: int = 6, latent_dim: int = 0, with_meshes: bool = True):
    """Random valid tree with every joint type represented over many seeds.

    Returns ``(object, meshes)``; meshes are the parts' OBB boxes.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_parts + 1))
    types = [_R, _C, _P, _S, _F]
    parts, meshes = [], {}
    for i in range(n):
        if i == 0:
            parent, jt = None, _F
        else:
            parent, jt = int(rng.integers(0, i)), types[int(rng.integers(0, len(types)))]
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        if jt in (_R, _C):
            a, b = np.sort(rng.uniform(-math.pi, math.pi, 2))
            rng4 = (-math.pi, math.pi, 0, 0) if jt is _C else (a, b, 0, 0)
        elif jt in (_P, _S):
            a, b = np.sort(rng.uniform(-0.3, 0.3, 2))
            rng4 = (0, 0, a, b)
        else:
            rng4 = (0, 0, 0, 0)
        obb = OrientedBox(rng.uniform(-0.4, 0.4, 3), rng.uniform(0.02, 0.2, 3), rng.uniform(-1, 1, 3))
        ref = f"meshes/p{i}.obj" if with_meshes else None
        if with_meshes:
            meshes[ref] = obb_mesh(obb)
        parts.append(PartNode(
            part_id=i,
            semantic_label=f"part{int(rng.integers(0, 4))}",
            obb=obb,
            joint=JointSpec(rng.uniform(-0.5, 0.5, 3), direction, jt, rng4,
                            float(rng.uniform(0.01, 0.05))),
            state=float(rng.uniform()),
            parent_id=parent,
            shape_latent=rng.standard_normal(latent_dim) if latent_dim else None,
            mesh_ref=ref,
        ))
    return ArticulatedObject(parts, 0, "random"), meshes
