"""Wavefront OBJ reading/writing (vertex and face records only)."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ParseError, ShapeError
from ..geometry import TriMesh


def parse_obj(text: str, source: str = "<string>") -> TriMesh:
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise ParseError(f"{source}:{lineno}: vertex needs 3 coordinates", line=lineno)
            try:
                verts.append([float(x) for x in rest[:3]])
            except ValueError:
                raise ParseError(f"{source}:{lineno}: bad vertex coordinate", line=lineno) from None
        elif tag == "f":
            if len(rest) < 3:
                raise ParseError(f"{source}:{lineno}: face needs at least 3 vertices", line=lineno)
            idx = []
            for tok in rest:
                try:
                    k = int(tok.split("/", 1)[0])
                except ValueError:
                    raise ParseError(f"{source}:{lineno}: bad face index {tok!r}", line=lineno) from None
                k = k - 1 if k > 0 else len(verts) + k
                if k < 0 or k >= len(verts):
                    raise ParseError(f"{source}:{lineno}: face index {tok!r} out of range", line=lineno)
                idx.append(k)
            for j in range(1, len(idx) - 1):
                faces.append((idx[0], idx[j], idx[j + 1]))
    try:
        return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                       np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ShapeError as exc:
        raise ParseError(f"{source}: {exc}") from exc


def load_obj(path) -> TriMesh:
    path = Path(path)
    return parse_obj(path.read_text("utf-8"), str(path))


def format_obj(mesh: TriMesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(lines) + "\n"


def save_obj(path, mesh: TriMesh) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_obj(mesh), "utf-8")
