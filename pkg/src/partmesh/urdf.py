"""URDF export of a fitted articulated object.

The start-state mesh is split into per-part OBJ files; part 0 becomes the
base link and each movable part becomes a child link driven by one joint.
Hinges place the joint origin at the fitted pivot with limits spanning
the recovered angle (padded 10 percent, split evenly on both sides);
sliders have no natural pivot, so their origin is the part centroid and
the limit spans the recovered travel.  Mesh vertices are stored in world
coordinates, so each visual/collision origin backs out the joint origin.

All numbers serialize with repr, which keeps parse-back lossless.
"""

from __future__ import annotations

import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .articulation import FREE, PRISMATIC, REVOLUTE, Joint
from .dataset import write_mesh_obj
from .meshfield import MeshField

_LIMIT_EFFORT = "10.0"
_LIMIT_VELOCITY = "1.0"


@dataclass
class UrdfModel:
    name: str
    path: str
    links: list = field(default_factory=list)
    joints: list = field(default_factory=list)


def _vec_attr(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def _mesh_geometry(parent: ET.Element, filename: str, origin) -> None:
    for tag in ("visual", "collision"):
        sec = ET.SubElement(parent, tag)
        ET.SubElement(sec, "origin", xyz=_vec_attr(origin), rpy="0 0 0")
        geom = ET.SubElement(sec, "geometry")
        ET.SubElement(geom, "mesh", filename=filename)


def export_urdf(mesh: MeshField, joints: dict, out_dir: str,
                name: str = "object") -> UrdfModel:
    """Write <name>.urdf plus per-part OBJ meshes under out_dir.

    joints is a list ordered by part (1..K) or a mapping from movable
    part index to a typed Joint; every movable part of the mesh must
    have one, and free (untyped) joints are rejected.
    """
    if not isinstance(joints, dict):
        joints = {k + 1: j for k, j in enumerate(joints)}
    num_parts = mesh.num_parts
    expected = set(range(1, num_parts))
    if set(joints) != expected:
        raise ValueError(
            f"joint-count mismatch: got parts {sorted(joints)}, "
            f"expected {sorted(expected)}"
        )
    for k, joint in joints.items():
        if joint.joint_type == FREE:
            raise ValueError(f"part {k} joint is untyped; run the bake-off first")

    os.makedirs(out_dir, exist_ok=True)
    model = UrdfModel(name=name, path=os.path.join(out_dir, f"{name}.urdf"))
    robot = ET.Element("robot", name=name)

    link_names = []
    part_centroids = {}
    for part in range(num_parts):
        positions, faces, vidx = mesh.part_submesh(part)
        if faces.shape[0] == 0:
            raise ValueError(f"part {part} has no faces to export")
        sub = MeshField(
            positions=positions, faces=faces,
            colors=mesh.colors[vidx], opacities=mesh.opacities[vidx],
            part_logits=mesh.part_logits[vidx],
        )
        part_centroids[part] = positions.mean(axis=0)
        obj_name = f"{name}_part_{part}.obj"
        write_mesh_obj(os.path.join(out_dir, obj_name), sub)
        link_name = "base_link" if part == 0 else f"link_{part}"
        link_names.append(link_name)
        model.links.append(link_name)

        if part == 0:
            frame_origin = np.zeros(3)
        else:
            joint = joints[part]
            if joint.joint_type == REVOLUTE:
                frame_origin = joint.pivot
            else:
                frame_origin = part_centroids[part]
        link = ET.SubElement(robot, "link", name=link_name)
        _mesh_geometry(link, obj_name, -frame_origin)

    for part in sorted(expected):
        joint = joints[part]
        jtype = "revolute" if joint.joint_type == REVOLUTE else "prismatic"
        el = ET.SubElement(robot, "joint", name=f"joint_{part}", type=jtype)
        ET.SubElement(el, "parent", link="base_link")
        ET.SubElement(el, "child", link=link_names[part])
        if joint.joint_type == REVOLUTE:
            origin = joint.pivot
            axis = joint.axis()
            span = joint.angle()
        else:
            origin = part_centroids[part]
            travel = float(np.linalg.norm(joint.translation))
            axis = joint.translation / travel if travel > 0.0 else np.array([1.0, 0.0, 0.0])
            span = travel
        ET.SubElement(el, "origin", xyz=_vec_attr(origin), rpy="0 0 0")
        ET.SubElement(el, "axis", xyz=_vec_attr(axis))
        ET.SubElement(
            el, "limit",
            lower=repr(-0.05 * span), upper=repr(1.05 * span),
            effort=_LIMIT_EFFORT, velocity=_LIMIT_VELOCITY,
        )
        model.joints.append(
            {
                "name": f"joint_{part}", "type": jtype, "part": part,
                "origin": np.asarray(origin, dtype=np.float64),
                "axis": np.asarray(axis, dtype=np.float64),
                "lower": -0.05 * span, "upper": 1.05 * span,
            }
        )

    tree = ET.ElementTree(robot)
    ET.indent(tree)
    tree.write(model.path, encoding="unicode", xml_declaration=True)
    return model


def parse_urdf(path: str) -> dict:
    """Read back the link/joint structure for round-trip checks."""
    root = ET.parse(path).getroot()
    links = [el.get("name") for el in root.findall("link")]
    joints = []
    for el in root.findall("joint"):
        entry = {
            "name": el.get("name"),
            "type": el.get("type"),
            "parent": el.find("parent").get("link"),
            "child": el.find("child").get("link"),
        }
        origin = el.find("origin")
        entry["origin"] = np.array(
            [float(t) for t in origin.get("xyz").split()]) if origin is not None else np.zeros(3)
        axis = el.find("axis")
        entry["axis"] = np.array(
            [float(t) for t in axis.get("xyz").split()]) if axis is not None else None
        limit = el.find("limit")
        if limit is not None:
            entry["lower"] = float(limit.get("lower"))
            entry["upper"] = float(limit.get("upper"))
        joints.append(entry)
    return {"name": root.get("name"), "links": links, "joints": joints}


def validate_urdf(path: str) -> list:
    """Structural conformance check; returns a list of problems (empty = ok)."""
    problems = []
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        return [f"not well-formed XML: {exc}"]
    if root.tag != "robot":
        problems.append(f"root element is {root.tag!r}, expected 'robot'")
    if not root.get("name"):
        problems.append("robot has no name attribute")

    link_names = []
    for el in root.findall("link"):
        lname = el.get("name")
        if not lname:
            problems.append("link without name")
        elif lname in link_names:
            problems.append(f"duplicate link {lname!r}")
        else:
            link_names.append(lname)
    if not link_names:
        problems.append("no links defined")

    children = {}
    for el in root.findall("joint"):
        jname = el.get("name") or "<unnamed>"
        jtype = el.get("type")
        if jtype not in ("revolute", "prismatic", "continuous", "fixed", "floating", "planar"):
            problems.append(f"joint {jname!r} has invalid type {jtype!r}")
        for tag in ("parent", "child"):
            ref = el.find(tag)
            if ref is None or not ref.get("link"):
                problems.append(f"joint {jname!r} missing <{tag} link=...>")
            elif ref.get("link") not in link_names:
                problems.append(f"joint {jname!r} references unknown link {ref.get('link')!r}")
        child = el.find("child")
        if child is not None:
            cname = child.get("link")
            if cname in children:
                problems.append(f"link {cname!r} is child of multiple joints")
            children[cname] = jname
        if jtype in ("revolute", "prismatic"):
            axis = el.find("axis")
            if axis is None or axis.get("xyz") is None:
                problems.append(f"joint {jname!r} missing <axis xyz=...>")
            else:
                vec = np.array([float(t) for t in axis.get("xyz").split()])
                if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
                    problems.append(f"joint {jname!r} axis is not unit length")
            limit = el.find("limit")
            if limit is None:
                problems.append(f"joint {jname!r} missing <limit>")
            else:
                for attr in ("lower", "upper", "effort", "velocity"):
                    if limit.get(attr) is None:
                        problems.append(f"joint {jname!r} limit missing {attr!r}")

    roots = [ln for ln in link_names if ln not in children]
    if len(roots) != 1:
        problems.append(f"expected exactly one root link, found {roots}")
    return problems
