"""PartNet-Mobility style URDF ingestion and URDF export.

Supported subset (see docs/urdf-subset.md): ``link`` with ``visual`` /
``geometry`` / ``mesh`` (OBJ) or ``box``; joints of type fixed, revolute,
continuous and prismatic with ``origin``, ``axis`` and ``limit``.  A
prismatic joint carrying a ``screw_pitch`` attribute is read as a screw joint.
Per-link ``<artikit_part>`` elements and ``artikit_*`` attributes on
``<robot>`` are vendor extensions written by :func:`export_urdf` so that the
full attribute set survives a round trip; other URDF readers ignore them.
"""
from __future__ import annotations

import dataclasses
import math
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from ..core import (
    DEFAULT_SCREW_PITCH,
    ArticulatedObject,
    JointSpec,
    JointType,
    OrientedBox,
    PartNode,
    forward_kinematics_amounts,
    make_transform,
    transform_points,
)
from ..errors import ParseError, StructuralError
from ..geometry import TriMesh, box_mesh, fit_obb, merge_meshes
from .objfile import load_obj, save_obj

WORLD_LINK = "world"
_SUPPORTED = {"fixed", "revolute", "continuous", "prismatic"}


def _floats(text, n, what, default=None):
    if text is None:
        if default is None:
            raise ParseError(f"missing {what}")
        return np.array(default, dtype=np.float64)
    try:
        vals = [float(x) for x in text.split()]
    except ValueError:
        raise ParseError(f"bad number in {what}: {text!r}") from None
    if len(vals) != n:
        raise ParseError(f"{what} needs {n} numbers, got {len(vals)}")
    return np.array(vals, dtype=np.float64)


def _origin(elem) -> np.ndarray:
    o = elem.find("origin") if elem is not None else None
    if o is None:
        return np.eye(4)
    xyz = _floats(o.get("xyz"), 3, "origin xyz", (0, 0, 0))
    rpy = _floats(o.get("rpy"), 3, "origin rpy", (0, 0, 0))
    # URDF rpy: fixed-axis roll, pitch, yaw
    return make_transform(Rotation.from_euler("xyz", rpy).as_matrix(), xyz)


def _read_semantics(directory: Path) -> dict:
    f = directory / "semantics.txt"
    if not f.exists():
        return {}
    labels = {}
    for line in f.read_text("utf-8").splitlines():
        toks = line.split()
        if len(toks) >= 3:
            labels[toks[0]] = toks[2]
    return labels


def _find_urdf(path: Path) -> Path:
    if path.is_file():
        return path
    if not path.is_dir():
        raise FileNotFoundError(f"{path} does not exist")
    preferred = path / "mobility.urdf"
    if preferred.exists():
        return preferred
    found = sorted(path.glob("*.urdf"))
    if not found:
        raise FileNotFoundError(f"no URDF document in {path}")
    return found[0]


def _link_geometry(link, base_dir: Path) -> Optional[TriMesh]:
    meshes = []
    for vis in link.findall("visual"):
        geom = vis.find("geometry")
        if geom is None:
            continue
        T = _origin(vis)
        m = geom.find("mesh")
        b = geom.find("box")
        if m is not None:
            fname = m.get("filename")
            if not fname:
                raise ParseError(f"link {link.get('name')!r}: mesh without filename")
            fname = fname.removeprefix("package://")
            mpath = base_dir / fname
            if not mpath.exists():
                raise FileNotFoundError(f"link {link.get('name')!r}: mesh {fname!r} not found")
            if mpath.suffix.lower() != ".obj":
                raise ParseError(f"link {link.get('name')!r}: unsupported mesh format {mpath.suffix!r}")
            mesh = load_obj(mpath)
            scale = _floats(m.get("scale"), 3, "mesh scale", (1, 1, 1))
            mesh = TriMesh(mesh.vertices * scale, mesh.faces)
        elif b is not None:
            size = _floats(b.get("size"), 3, "box size")
            mesh = box_mesh(-size / 2, size / 2)
        else:
            continue
        meshes.append(mesh.transformed(T))
    return merge_meshes(meshes) if meshes else None


def _joint_range(jtype: JointType, limit, name) -> tuple:
    if jtype is JointType.FIXED:
        return (0.0, 0.0, 0.0, 0.0)
    if limit is None or limit.get("lower") is None or limit.get("upper") is None:
        if jtype is JointType.CONTINUOUS:
            return (-math.pi, math.pi, 0.0, 0.0)
        raise ParseError(f"joint {name!r}: {jtype.value} joint requires <limit lower upper>")
    try:
        lo, hi = float(limit.get("lower")), float(limit.get("upper"))
    except ValueError:
        raise ParseError(f"joint {name!r}: bad limit values") from None
    if jtype.is_rotational:
        return (lo, hi, 0.0, 0.0)
    return (0.0, 0.0, lo, hi)


def parse_mobility_urdf(path, normalize: bool = True, screw_pitch: float = DEFAULT_SCREW_PITCH):
    """Ingest a URDF asset directory.

    Returns ``(object, meshes)``; parts follow link document order and every
    mesh is expressed in the object's rest frame (all joints at their lower
    limit).  With ``normalize`` the rest-state union AABB is mapped into the
    unit cube centred at the origin, unless the document declares (via
    ``artikit_norm_*`` attributes) that it already is.
    """
    urdf = _find_urdf(Path(path))
    base_dir = urdf.parent
    try:
        root = ET.parse(urdf).getroot()
    except ET.ParseError as exc:
        raise ParseError(f"{urdf}: malformed XML: {exc}", line=exc.position[0]) from None
    if root.tag != "robot":
        raise ParseError(f"{urdf}: root element must be <robot>")
    semantics = _read_semantics(base_dir)

    links = {}
    link_order = []
    for link in root.findall("link"):
        name = link.get("name")
        if not name:
            raise ParseError(f"{urdf}: link without name")
        if name in links:
            raise ParseError(f"{urdf}: duplicate link {name!r}")
        links[name] = link
        link_order.append(name)

    joints = {}  # child -> joint element
    for j in root.findall("joint"):
        jname = j.get("name", "?")
        jtype = j.get("type")
        if jtype not in _SUPPORTED:
            raise ParseError(f"{urdf}: joint {jname!r} has unsupported type {jtype!r}")
        parent = j.find("parent")
        child = j.find("child")
        if parent is None or child is None:
            raise ParseError(f"{urdf}: joint {jname!r} needs <parent> and <child>")
        p, c = parent.get("link"), child.get("link")
        if p not in links or c not in links:
            raise ParseError(f"{urdf}: joint {jname!r} references unknown link")
        if c in joints:
            raise StructuralError(f"{urdf}: kinematic loop, link {c!r} has two parent joints")
        joints[c] = j

    # cycle check: walk every link towards the root
    for name in link_order:
        seen = [name]
        while seen[-1] in joints:
            nxt = joints[seen[-1]].find("parent").get("link")
            if nxt in seen:
                cycle = seen[seen.index(nxt):] + [nxt]
                raise StructuralError(f"{urdf}: kinematic loop {' -> '.join(cycle)}")
            seen.append(nxt)
    roots = [n for n in link_order if n not in joints]
    if len(roots) != 1:
        raise StructuralError(f"{urdf}: multiple root links {roots}")
    root_link = roots[0]

    world_frame = np.eye(4)
    root_axis = np.array([0.0, 0.0, 1.0])
    part_links = list(link_order)
    # a geometry-less anchor link ("world", PartNet-Mobility's "base") is not a part
    anchor = links[root_link]
    if not anchor.findall("visual") and anchor.find("artikit_part") is None:
        children = [c for c, j in joints.items() if j.find("parent").get("link") == root_link]
        if len(children) == 1 and joints[children[0]].get("type") == "fixed":
            part_links.remove(root_link)
            anchor_joint = joints[children[0]]
            world_frame = _origin(anchor_joint)
            root_link = children[0]
            if anchor_joint.find("axis") is not None:
                root_axis = _floats(anchor_joint.find("axis").get("xyz"), 3, "axis xyz")

    # link frames at zero joint values
    frames = {root_link: world_frame}

    def frame_of(name):
        if name not in frames:
            j = joints[name]
            frames[name] = frame_of(j.find("parent").get("link")) @ _origin(j)
        return frames[name]

    index = {name: i for i, name in enumerate(part_links)}
    parts, meshes0, lowers, obb0 = [], {}, [], {}
    for name in part_links:
        i = index[name]
        W = frame_of(name)
        ext = links[name].find("artikit_part")
        if name == root_link:
            jtype, jrange, origin, direction, parent, pitch = JointType.FIXED, (0.0,) * 4, W[:3, 3], root_axis, None, screw_pitch
        else:
            j = joints[name]
            raw_type = j.get("type")
            pitch_attr = j.get("screw_pitch")
            jtype = JointType(raw_type)
            pitch = screw_pitch
            if pitch_attr is not None and jtype is JointType.PRISMATIC:
                jtype, pitch = JointType.SCREW, float(pitch_attr)
            jrange = _joint_range(jtype, j.find("limit"), j.get("name"))
            axis_el = j.find("axis")
            axis = _floats(axis_el.get("xyz") if axis_el is not None else None, 3, "axis xyz", (1, 0, 0))
            if jtype is JointType.FIXED:
                axis = np.array([0.0, 0.0, 1.0]) if axis_el is None else axis
            direction = W[:3, :3] @ axis
            origin = W[:3, 3]
            parent = index[j.find("parent").get("link")]
        if ext is not None and ext.get("joint_pitch") is not None and jtype is not JointType.SCREW:
            pitch = float(ext.get("joint_pitch"))
        joint = JointSpec(origin, direction, jtype, jrange, pitch)
        lowers.append(joint.motion_limits[0])
        mesh = _link_geometry(links[name], base_dir)
        if mesh is not None:
            meshes0[i] = mesh.transformed(W)
        label = semantics.get(name, name)
        state, latent = 0.0, None
        if ext is not None:
            label = ext.get("label", label)
            state = float(ext.get("state", 0.0))
            if ext.get("latent"):
                latent = [float(x) for x in ext.get("latent").split()]
            if ext.get("obb_center") is not None:
                obb0[i] = OrientedBox(
                    _floats(ext.get("obb_center"), 3, "obb_center"),
                    _floats(ext.get("obb_half_extents"), 3, "obb_half_extents"),
                    _floats(ext.get("obb_rotation"), 3, "obb_rotation"),
                )
        parts.append(PartNode(i, label, OrientedBox(W[:3, 3], (1e-6,) * 3), joint, state,
                              parent, latent, None))

    category = root.get("name", "object")
    zero_obj = ArticulatedObject(parts, index[root_link], category)

    # move from zero joint values to the rest configuration (lower limits)
    W_rest = forward_kinematics_amounts(zero_obj, lowers)
    rest_meshes = {i: (m if np.array_equal(W_rest[i], np.eye(4)) else m.transformed(W_rest[i]))
                   for i, m in meshes0.items()}
    rest_parts = []
    for i, p in enumerate(parts):
        Wp = np.eye(4) if p.parent_id is None else W_rest[p.parent_id]
        joint = dataclasses.replace(
            p.joint,
            origin=transform_points(Wp, np.asarray(p.joint.origin)[None])[0],
            direction=Wp[:3, :3] @ np.asarray(p.joint.direction),
        )
        obb = obb0[i].transformed(W_rest[i]) if i in obb0 else p.obb.transformed(W_rest[i])
        rest_parts.append(dataclasses.replace(p, joint=joint, obb=obb))

    norm_center = np.zeros(3)
    norm_scale = 1.0
    declared = root.get("artikit_norm_scale")
    if declared is not None:
        norm_center = _floats(root.get("artikit_norm_center"), 3, "artikit_norm_center")
        norm_scale = float(declared)
    elif normalize:
        if rest_meshes:
            pts = np.concatenate([m.vertices for m in rest_meshes.values()])
        else:
            pts = np.concatenate([p.obb.corners() for p in rest_parts])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        extent = float(np.max(hi - lo))
        c = (lo + hi) / 2.0
        k = 1.0 / extent if extent > 0 else 1.0
        rest_parts = [_scale_part(p, c, k) for p in rest_parts]
        rest_meshes = {i: TriMesh((m.vertices - c) * k, m.faces) for i, m in rest_meshes.items()}
        norm_center, norm_scale = c, k

    final_parts, mesh_store = [], {}
    for i, p in enumerate(rest_parts):
        ref = None
        if i in rest_meshes:
            ref = f"meshes/{_safe_name(part_links[i])}.obj"
            mesh_store[ref] = rest_meshes[i]
            if i not in obb0:
                p = dataclasses.replace(p, obb=fit_obb(rest_meshes[i].vertices))
        final_parts.append(dataclasses.replace(p, mesh_ref=ref))
    obj = ArticulatedObject(final_parts, index[root_link], category, norm_center, norm_scale)
    return obj, mesh_store


def _safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def _scale_part(p: PartNode, c, k) -> PartNode:
    j = p.joint
    r = j.range
    joint = dataclasses.replace(
        j,
        origin=(np.asarray(j.origin) - c) * k,
        range=(r[0], r[1], r[2] * k, r[3] * k),
        screw_pitch=j.screw_pitch * k if j.joint_type is JointType.SCREW else j.screw_pitch,
    )
    obb = OrientedBox((np.asarray(p.obb.center) - c) * k, np.asarray(p.obb.half_extents) * k, p.obb.rotation)
    return dataclasses.replace(p, joint=joint, obb=obb)


def _fmt(v) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(v).reshape(-1))


def export_urdf(obj: ArticulatedObject, meshes: Optional[dict], path) -> Path:
    """Write ``<path>/mobility.urdf`` plus ``meshes/part_<id>.obj``.

    The document is posed at zero joint values, link frames are world-aligned
    and sit on their joint axis origin, and the root hangs off a ``world`` link
    through a fixed joint.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lowers = [p.joint.motion_limits[0] for p in obj.parts]
    W0 = forward_kinematics_amounts(obj, [-x for x in lowers])
    pos = {}
    for i, p in enumerate(obj.parts):
        if p.parent_id is None:
            pos[i] = np.asarray(p.joint.origin)
        else:
            Wp = W0[obj.index_of(p.parent_id)]
            pos[i] = transform_points(Wp, np.asarray(p.joint.origin)[None])[0]

    robot = ET.Element("robot", {
        "name": obj.category,
        "artikit_norm_center": _fmt(obj.norm_center),
        "artikit_norm_scale": repr(obj.norm_scale),
    })
    ET.SubElement(robot, "link", {"name": WORLD_LINK})
    names = [f"part_{p.part_id}" for p in obj.parts]
    for i, p in enumerate(obj.parts):
        link = ET.SubElement(robot, "link", {"name": names[i]})
        if p.mesh_ref is not None:
            if meshes is None or p.mesh_ref not in meshes:
                raise FileNotFoundError(f"mesh {p.mesh_ref!r} missing from mesh store")
            posed = meshes[p.mesh_ref].transformed(W0[i])
            local = TriMesh(posed.vertices - pos[i], posed.faces)
            rel = f"meshes/{names[i]}.obj"
            save_obj(out / rel, local)
            vis = ET.SubElement(link, "visual")
            geom = ET.SubElement(vis, "geometry")
            ET.SubElement(geom, "mesh", {"filename": rel})
        obb = p.obb.transformed(W0[i])
        attrs = {
            "label": p.semantic_label,
            "state": repr(p.state),
            "obb_center": _fmt(obb.center),
            "obb_half_extents": _fmt(obb.half_extents),
            "obb_rotation": _fmt(obb.rotation),
            "joint_pitch": repr(p.joint.screw_pitch),
        }
        if p.shape_latent is not None:
            attrs["latent"] = _fmt(p.shape_latent)
        ET.SubElement(link, "artikit_part", attrs)

    for i, p in enumerate(obj.parts):
        if p.parent_id is None:
            j = ET.SubElement(robot, "joint", {"name": "root_joint", "type": "fixed"})
            ET.SubElement(j, "origin", {"xyz": _fmt(pos[i]), "rpy": "0.0 0.0 0.0"})
            ET.SubElement(j, "parent", {"link": WORLD_LINK})
            ET.SubElement(j, "child", {"link": names[i]})
            ET.SubElement(j, "axis", {"xyz": _fmt(p.joint.direction)})
            continue
        pi = obj.index_of(p.parent_id)
        jt = p.joint.joint_type
        attrs = {"name": f"joint_{p.part_id}",
                 "type": "prismatic" if jt is JointType.SCREW else jt.value}
        if jt is JointType.SCREW:
            attrs["screw_pitch"] = repr(p.joint.screw_pitch)
        j = ET.SubElement(robot, "joint", attrs)
        ET.SubElement(j, "origin", {"xyz": _fmt(pos[i] - pos[pi]), "rpy": "0.0 0.0 0.0"})
        ET.SubElement(j, "parent", {"link": names[pi]})
        ET.SubElement(j, "child", {"link": names[i]})
        Wp = W0[pi]
        ET.SubElement(j, "axis", {"xyz": _fmt(Wp[:3, :3] @ np.asarray(p.joint.direction))})
        if jt is not JointType.FIXED:
            lo, hi = p.joint.motion_limits
            ET.SubElement(j, "limit", {"lower": repr(lo), "upper": repr(hi), "effort": "1.0", "velocity": "1.0"})
    ET.indent(robot)
    target = out / "mobility.urdf"
    ET.ElementTree(robot).write(target, encoding="utf-8", xml_declaration=True)
    return target
