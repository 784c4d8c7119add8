"""Dataset records and their on-disk layout.

A dataset directory holds one articulated object observed in two states:

    manifest.json          image size, states, view table, file pointers
    views/<name>_rgb.png   8-bit RGB
    views/<name>_depth.raw float32 depth, 12-byte header (w, h, c int32,
                           little-endian), row-major; 0 marks invalid
    views/<name>_seg.png   8-bit palette PNG; 255 is background, which
                           loads as label -1
    init_mesh.obj(+.attrs) noisy initialization mesh
    gt_mesh_0.obj, gt_mesh_1.obj, joints_gt.json   ground truth (optional)

Meshes travel as OBJ plus a text attribute sidecar; all floats serialize
with repr so every array round-trips bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .articulation import Joint
from .geometry import PinholeCamera
from .meshfield import MeshField

BACKGROUND_INDEX = 255


@dataclass
class CameraView:
    """One posed observation: RGB, depth, and part segmentation."""

    camera: PinholeCamera
    image: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    state: int
    split: str = "train"


# ---------------------------------------------------------------------------
# image payloads
# ---------------------------------------------------------------------------

def write_rgb_png(path: str, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def read_rgb_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_depth_raw(path: str, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim == 2:
        depth = depth[:, :, None]
    h, w, c = depth.shape
    with open(path, "wb") as fh:
        fh.write(np.array([w, h, c], dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def read_depth_raw(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(12), dtype="<i4")
        w, h, c = (int(x) for x in header)
        data = np.frombuffer(fh.read(4 * w * h * c), dtype="<f4")
    out = data.reshape(h, w, c).astype(np.float64)
    return out[:, :, 0] if c == 1 else out

_SEG_PALETTE = np.array(
    [
        [90, 90, 100], [230, 120, 70], [80, 170, 220], [120, 200, 120],
        [220, 200, 90], [180, 110, 200], [200, 140, 140], [130, 220, 200],
    ],
    dtype=np.uint8,
)


def write_seg_png(path: str, labels: np.ndarray) -> None:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.min() < -1 or lab.max() >= BACKGROUND_INDEX:
        raise ValueError("labels out of storable range")
    idx = np.where(lab < 0, BACKGROUND_INDEX, lab).astype(np.uint8)
    img = Image.fromarray(idx, mode="P")
    palette = np.zeros((256, 3), dtype=np.uint8)
    n = _SEG_PALETTE.shape[0]
    palette[: n] = _SEG_PALETTE
    img.putpalette(palette.ravel().tolist())
    img.save(path)


def read_seg_png(path: str) -> np.ndarray:
    idx = np.asarray(Image.open(path), dtype=np.int64)
    return np.where(idx == BACKGROUND_INDEX, -1, idx)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def write_mesh_obj(path: str, mesh: MeshField) -> None:
    """OBJ geometry plus a sidecar with the non-OBJ vertex attributes.

    The sidecar (<path>.attrs.txt) holds one line per vertex: opacity,
    part logits, then spherical-harmonic color coefficients, all repr'd
    so parsing returns the identical float64 values.
    """
    with open(path, "w") as fh:
        fh.write("# part-aware mesh\n")
        # tolist() hands back Python floats carrying the same 64-bit value,
        # whose repr parses back bit-exact
        for p in mesh.positions.tolist():
            fh.write(f"v {p[0]!r} {p[1]!r} {p[2]!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    bands = mesh.colors.shape[1]
    kp = mesh.part_logits.shape[1]
    with open(path + ".attrs.txt", "w") as fh:
        fh.write(f"# opacity logits[{kp}] sh[{bands}x3]\n")
        fh.write(f"{kp} {bands}\n")
        for i in range(mesh.num_vertices):
            parts = [repr(float(mesh.opacities[i]))]
            parts += [repr(x) for x in mesh.part_logits[i].tolist()]
            parts += [repr(x) for x in mesh.colors[i].ravel().tolist()]
            fh.write(" ".join(parts) + "\n")


def read_mesh_obj(path: str) -> MeshField:
    positions = []
    faces = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                positions.append([float(t) for t in line.split()[1:4]])
            elif line.startswith("f "):
                idx = [int(t.split("/")[0]) - 1 for t in line.split()[1:4]]
                faces.append(idx)
    positions = np.array(positions, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)

    attrs = path + ".attrs.txt"
    if os.path.exists(attrs):
        with open(attrs) as fh:
            fh.readline()
            kp, bands = (int(t) for t in fh.readline().split())
            rows = [[float(t) for t in line.split()] for line in fh if line.strip()]
        arr = np.array(rows, dtype=np.float64)
        opacities = arr[:, 0]
        logits = arr[:, 1 : 1 + kp]
        colors = arr[:, 1 + kp :].reshape(-1, bands, 3)
    else:
        n = positions.shape[0]
        opacities = np.ones(n)
        logits = np.zeros((n, 1))
        colors = np.full((n, 1, 3), 0.5)
    return MeshField(
        positions=positions, faces=faces, colors=colors,
        opacities=opacities, part_logits=logits,
    )


# ---------------------------------------------------------------------------
# cameras and joints as JSON fragments
# ---------------------------------------------------------------------------

def camera_to_json(cam: PinholeCamera) -> dict:
    return {
        "rotation": [float(x) for x in cam.rotation.ravel()],
        "translation": [float(x) for x in cam.translation],
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "near": cam.near, "far": cam.far,
    }


def camera_from_json(data: dict) -> PinholeCamera:
    return PinholeCamera(
        rotation=np.array(data["rotation"], dtype=np.float64).reshape(3, 3),
        translation=np.array(data["translation"], dtype=np.float64),
        fx=data["fx"], fy=data["fy"], cx=data["cx"], cy=data["cy"],
        width=data["width"], height=data["height"],
        near=data["near"], far=data["far"],
    )


def joint_to_json(joint: Joint) -> dict:
    return {
        "joint_type": joint.joint_type,
        "rotvec": [float(x) for x in joint.rotvec],
        "pivot": [float(x) for x in joint.pivot],
        "translation": [float(x) for x in joint.translation],
    }


def joint_from_json(data: dict) -> Joint:
    return Joint(
        rotvec=np.array(data["rotvec"], dtype=np.float64),
        pivot=np.array(data["pivot"], dtype=np.float64),
        translation=np.array(data["translation"], dtype=np.float64),
        joint_type=data["joint_type"],
    )


def write_joints_json(path: str, joints: list, extra: dict | None = None) -> None:
    payload = {"joints": [joint_to_json(j) for j in joints]}
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def read_joints_json(path: str):
    with open(path) as fh:
        payload = json.load(fh)
    return [joint_from_json(j) for j in payload["joints"]], payload


# ---------------------------------------------------------------------------
# whole datasets
# ---------------------------------------------------------------------------

def save_dataset(root: str, views: list, init_mesh: MeshField, gt=None) -> None:
    """Write a dataset directory; gt is a synth.GroundTruth or None."""
    os.makedirs(os.path.join(root, "views"), exist_ok=True)
    view_rows = []
    counters = {}
    for view in views:
        key = (view.state, view.split)
        counters[key] = counters.get(key, 0)
        name = f"s{view.state}_{view.split}_{counters[key]:03d}"
        counters[key] += 1
        rgb = os.path.join("views", name + "_rgb.png")
        dep = os.path.join("views", name + "_depth.raw")
        seg = os.path.join("views", name + "_seg.png")
        write_rgb_png(os.path.join(root, rgb), view.image)
        write_depth_raw(os.path.join(root, dep), view.depth)
        write_seg_png(os.path.join(root, seg), view.labels)
        view_rows.append(
            {
                "state": view.state, "split": view.split,
                "rgb": rgb, "depth": dep, "seg": seg,
                "camera": camera_to_json(view.camera),
            }
        )
    write_mesh_obj(os.path.join(root, "init_mesh.obj"), init_mesh)
    manifest = {"views": view_rows, "init_mesh": "init_mesh.obj"}
    if gt is not None:
        write_mesh_obj(os.path.join(root, "gt_mesh_0.obj"), gt.mesh_start)
        write_mesh_obj(os.path.join(root, "gt_mesh_1.obj"), gt.mesh_end)
        manifest["ground_truth"] = {
            "template": gt.template,
            "mesh_start": "gt_mesh_0.obj",
            "mesh_end": "gt_mesh_1.obj",
            "joints": [
                {
                    "joint_type": j.joint_type,
                    "axis": [float(x) for x in j.axis],
                    "pivot": [float(x) for x in j.pivot],
                    "range": float(j.range),
                    "q_start": float(j.q_start),
                    "q_end": float(j.q_end),
                }
                for j in gt.joints
            ],
        }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


class LoadedDataset:
    def __init__(self, views, init_mesh, gt):
        self.views = views
        self.init_mesh = init_mesh
        self.gt = gt


def load_dataset(root: str) -> LoadedDataset:
    with open(os.path.join(root, "manifest.json")) as fh:
        manifest = json.load(fh)
    views = []
    for row in manifest["views"]:
        views.append(
            CameraView(
                camera=camera_from_json(row["camera"]),
                image=read_rgb_png(os.path.join(root, row["rgb"])),
                depth=read_depth_raw(os.path.join(root, row["depth"])),
                labels=read_seg_png(os.path.join(root, row["seg"])),
                state=row["state"],
                split=row["split"],
            )
        )
    init_mesh = read_mesh_obj(os.path.join(root, manifest["init_mesh"]))
    num_parts = init_mesh.num_parts
    for view, row in zip(views, manifest["views"]):
        bad = np.unique(view.labels[view.labels >= num_parts])
        if bad.size:
            raise ValueError(
                f"{row['seg']} contains labels {bad.tolist()}; "
                f"valid ids are -1..{num_parts - 1}"
            )
    gt = None
    if "ground_truth" in manifest:
        from .synth import GroundTruth, GTJoint  # deferred; synth imports us

        g = manifest["ground_truth"]
        gt = GroundTruth(
            template=g["template"],
            joints=[
                GTJoint(
                    joint_type=j["joint_type"],
                    axis=np.array(j["axis"], dtype=np.float64),
                    pivot=np.array(j["pivot"], dtype=np.float64),
                    range=j["range"],
                    q_start=j["q_start"],
                    q_end=j["q_end"],
                )
                for j in g["joints"]
            ],
            mesh_start=read_mesh_obj(os.path.join(root, g["mesh_start"])),
            mesh_end=read_mesh_obj(os.path.join(root, g["mesh_end"])),
        )
    return LoadedDataset(views, init_mesh, gt)


def write_loss_log_csv(path: str, rows: list) -> None:
    keys = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(k, "")) for k in keys) + "\n")
