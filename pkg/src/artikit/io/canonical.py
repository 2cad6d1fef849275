"""Canonical object files (``.akj``): human-diffable JSON with full float precision."""
from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path, PurePosixPath
from typing import Optional

from ..core import ArticulatedObject, JointSpec, JointType, OrientedBox, PartNode, validate_object
from ..errors import FormatError, ParseError
from .objfile import load_obj, save_obj

FORMAT_VERSION = "1"
_TOP_REQUIRED = {"format_version", "category", "root", "parts"}
_TOP_OPTIONAL = {"normalization", "frame"}
_PART_KEYS = {"id", "label", "joint", "obb", "state", "latent", "mesh", "parent"}
_JOINT_KEYS = {"type", "origin", "direction", "range", "pitch"}
_OBB_KEYS = {"center", "half_extents", "rotation"}
FRAMES = ("rest", "posed")


def object_to_dict(obj: ArticulatedObject, frame: str = "rest") -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "category": obj.category,
        "root": obj.root_id,
        "normalization": {"center": list(obj.norm_center), "scale": obj.norm_scale},
    }
    if frame != "rest":
        doc["frame"] = frame
    doc["parts"] = [
        {
            "id": p.part_id,
            "label": p.semantic_label,
            "parent": p.parent_id,
            "joint": {
                "type": p.joint.joint_type.value,
                "origin": list(p.joint.origin),
                "direction": list(p.joint.direction),
                "range": list(p.joint.range),
                "pitch": p.joint.screw_pitch,
            },
            "obb": {
                "center": list(p.obb.center),
                "half_extents": list(p.obb.half_extents),
                "rotation": list(p.obb.rotation),
            },
            "state": p.state,
            "latent": None if p.shape_latent is None else list(p.shape_latent),
            "mesh": p.mesh_ref,
        }
        for p in obj.parts
    ]
    return doc


def dumps_object(obj: ArticulatedObject, frame: str = "rest") -> str:
    # json emits repr() for floats, which round-trips exactly
    return json.dumps(object_to_dict(obj, frame), indent=1, allow_nan=False) + "\n"


class _Reader:
    def __init__(self, source):
        self.source = source

    def fail(self, path, msg):
        raise ParseError(f"{self.source}: {path}: {msg}", path=path)

    def keys(self, d, path, required, optional=frozenset()):
        if not isinstance(d, dict):
            self.fail(path, "expected an object")
        missing = required - d.keys()
        if missing:
            self.fail(f"{path}.{sorted(missing)[0]}" if path else sorted(missing)[0], "missing field")
        extra = d.keys() - required - optional
        if extra:
            self.fail(f"{path}.{sorted(extra)[0]}" if path else sorted(extra)[0], "unknown field")

    def num(self, v, path):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            self.fail(path, f"expected a finite number, got {v!r}")
        return float(v)

    def int(self, v, path):
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(path, f"expected an integer, got {v!r}")
        return v

    def vec(self, v, n, path):
        if not isinstance(v, list) or len(v) != n:
            self.fail(path, f"expected a list of {n} numbers")
        return [self.num(x, f"{path}[{i}]") for i, x in enumerate(v)]

    def str(self, v, path):
        if not isinstance(v, str):
            self.fail(path, f"expected a string, got {v!r}")
        return v


def object_from_dict(doc, source="<object>") -> ArticulatedObject:
    r = _Reader(source)
    if not isinstance(doc, dict):
        r.fail("", "expected a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format_version {doc.get('format_version')!r}",
                          path="format_version")
    r.keys(doc, "", _TOP_REQUIRED, _TOP_OPTIONAL)
    frame = doc.get("frame", "rest")
    if frame not in FRAMES:
        r.fail("frame", f"expected one of {FRAMES}")
    norm_center, norm_scale = [0.0, 0.0, 0.0], 1.0
    if "normalization" in doc:
        r.keys(doc["normalization"], "normalization", {"center", "scale"})
        norm_center = r.vec(doc["normalization"]["center"], 3, "normalization.center")
        norm_scale = r.num(doc["normalization"]["scale"], "normalization.scale")
    if not isinstance(doc["parts"], list) or not doc["parts"]:
        r.fail("parts", "expected a non-empty list")
    parts = []
    for k, p in enumerate(doc["parts"]):
        path = f"parts[{k}]"
        r.keys(p, path, _PART_KEYS)
        j = p["joint"]
        r.keys(j, f"{path}.joint", _JOINT_KEYS)
        jt_raw = r.str(j["type"], f"{path}.joint.type")
        if jt_raw not in {t.value for t in JointType}:
            r.fail(f"{path}.joint.type", f"unknown joint type {jt_raw!r}")
        direction = r.vec(j["direction"], 3, f"{path}.joint.direction")
        try:
            joint = JointSpec(
                r.vec(j["origin"], 3, f"{path}.joint.origin"),
                direction,
                JointType(jt_raw),
                r.vec(j["range"], 4, f"{path}.joint.range"),
                r.num(j["pitch"], f"{path}.joint.pitch"),
            )
        except ValueError as exc:
            r.fail(f"{path}.joint.direction", str(exc))
        b = p["obb"]
        r.keys(b, f"{path}.obb", _OBB_KEYS)
        obb = OrientedBox(
            r.vec(b["center"], 3, f"{path}.obb.center"),
            r.vec(b["half_extents"], 3, f"{path}.obb.half_extents"),
            r.vec(b["rotation"], 3, f"{path}.obb.rotation"),
        )
        state = r.num(p["state"], f"{path}.state")
        if not 0.0 <= state <= 1.0:
            r.fail(f"{path}.state", f"state {state} outside [0, 1]")
        latent = p["latent"]
        if latent is not None:
            if not isinstance(latent, list):
                r.fail(f"{path}.latent", "expected a list or null")
            latent = [r.num(x, f"{path}.latent[{i}]") for i, x in enumerate(latent)]
        mesh = p["mesh"]
        if mesh is not None:
            r.str(mesh, f"{path}.mesh")
        parent = p["parent"]
        if parent is not None:
            parent = r.int(parent, f"{path}.parent")
        parts.append(PartNode(
            part_id=r.int(p["id"], f"{path}.id"),
            semantic_label=r.str(p["label"], f"{path}.label"),
            obb=obb, joint=joint, state=state, parent_id=parent,
            shape_latent=latent, mesh_ref=mesh,
        ))
    obj = ArticulatedObject(parts, r.int(doc["root"], "root"), r.str(doc["category"], "category"),
                            norm_center, norm_scale)
    report = validate_object(obj)
    if not report.ok:
        raise ParseError(f"{source}: invalid object: {report}", path="parts")
    return obj


def loads_object(text: str, source="<string>") -> ArticulatedObject:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: malformed JSON at byte {len(text[:exc.pos].encode())}: {exc.msg}",
                         offset=len(text[:exc.pos].encode())) from None
    return object_from_dict(doc, source)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_object(path, obj: ArticulatedObject, frame: str = "rest") -> None:
    atomic_write_text(path, dumps_object(obj, frame))


def load_object(path) -> ArticulatedObject:
    path = Path(path)
    return loads_object(path.read_text("utf-8"), str(path))


def _safe_relative(ref: str) -> PurePosixPath:
    rel = PurePosixPath(ref)
    if rel.is_absolute() or ".." in rel.parts:
        raise ParseError(f"mesh reference {ref!r} must be a relative path inside the object directory")
    return rel


def load_asset(path):
    """Object plus its mesh store; mesh refs are paths relative to the file."""
    path = Path(path)
    obj = load_object(path)
    meshes = {}
    for p in obj.parts:
        if p.mesh_ref is not None and p.mesh_ref not in meshes:
            meshes[p.mesh_ref] = load_obj(path.parent / _safe_relative(p.mesh_ref))
    return obj, meshes


def save_asset(path, obj: ArticulatedObject, meshes: Optional[dict] = None, frame: str = "rest") -> None:
    path = Path(path)
    for ref in {p.mesh_ref for p in obj.parts if p.mesh_ref is not None}:
        if meshes is None or ref not in meshes:
            raise FileNotFoundError(f"mesh {ref!r} missing from mesh store")
        save_obj(path.parent / _safe_relative(ref), meshes[ref])
    save_object(path, obj, frame)
