"""Synthetic articulated-object benchmark scenes.

Each scene is an axis-aligned cuboid assembly drawn from a small template
family (a lidded box, sliding drawers, a swinging door, and combinations),
observed in two articulation states by cameras scattered on a spherical
cap above the object.  Renders come from the hard rasterizer path, so the
RGB / depth / segmentation images are exact for the ground-truth mesh.

Articulation is parameterized by a normalized coordinate q in [0, 1] that
maps linearly onto each joint's motion range.  A hinge with a 60 degree
range moved from q=0.7 to q=0.3 therefore closes by 24 degrees.  All
joints of a multi-joint object share the scene's q values; their ranges
differ.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .articulation import (
    PRISMATIC,
    REVOLUTE,
    Joint,
    transport_points,
)
from .dataset import CameraView
from .geometry import PinholeCamera, rotvec_to_matrix
from .meshfield import MeshField
from .raster import RenderConfig, render, segmentation_map

TEMPLATES = ("hinged_box", "drawer_cabinet", "multi_drawer", "door_drawer")

_PALETTE = np.array(
    [
        [0.45, 0.45, 0.52],
        [0.82, 0.42, 0.25],
        [0.30, 0.62, 0.80],
        [0.42, 0.74, 0.40],
        [0.80, 0.72, 0.34],
    ]
)


@dataclass
class SceneSpec:
    """Knobs for one synthetic scene.

    q_start / q_end default to None and are then sampled uniformly from
    [0.60, 0.80] and [0.20, 0.40].  When given explicitly they must land
    in those brackets.
    """

    template: str = "hinged_box"
    seed: int = 0
    q_start: float | None = None
    q_end: float | None = None
    image_size: int = 64
    n_train: int = 16
    n_test: int = 4
    albedo_contrast: float = 0.6
    shading_amplitude: float = 0.25
    target_edge: float = 0.07
    camera_radius: float | None = None
    init_noise: float | None = None

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        for name, val, lo, hi in (
            ("q_start", self.q_start, 0.60, 0.80),
            ("q_end", self.q_end, 0.20, 0.40),
        ):
            if val is not None and not (lo <= val <= hi):
                raise ValueError(f"{name}={val} outside [{lo}, {hi}]")
        if self.n_train < 1 or self.n_test < 0:
            raise ValueError("need at least one training view per state")
        if self.image_size < 8:
            raise ValueError("image_size too small")


@dataclass
class GTJoint:
    """True joint of one movable part, in template coordinates.

    range is the full motion extent reached at q=1: radians about axis
    through pivot for a hinge, meters along axis for a slider.
    """

    joint_type: str
    axis: np.ndarray
    pivot: np.ndarray
    range: float
    q_start: float
    q_end: float

    def pose_joint(self, q: float) -> Joint:
        """Template -> state-q placement of this part."""
        if self.joint_type == REVOLUTE:
            return Joint(rotvec=self.axis * (self.range * q), pivot=self.pivot,
                         joint_type=REVOLUTE)
        return Joint(translation=self.axis * (self.range * q),
                     joint_type=PRISMATIC)

    def relative_joint(self) -> Joint:
        """Start-state -> end-state motion (the quantity fitting recovers)."""
        dq = self.q_end - self.q_start
        if self.joint_type == REVOLUTE:
            return Joint(rotvec=self.axis * (self.range * dq), pivot=self.pivot,
                         joint_type=REVOLUTE)
        return Joint(translation=self.axis * (self.range * dq),
                     joint_type=PRISMATIC)

    @property
    def motion_magnitude(self) -> float:
        return abs(self.range * (self.q_end - self.q_start))


@dataclass
class GroundTruth:
    template: str
    joints: list
    mesh_start: MeshField
    mesh_end: MeshField

    @property
    def num_parts(self) -> int:
        return len(self.joints) + 1

    def relative_joints(self) -> list:
        """Start -> end Joint per movable part, ordered 1..K."""
        return [j.relative_joint() for j in self.joints]


@dataclass
class Scene:
    spec: SceneSpec
    gt: GroundTruth
    views: list = field(default_factory=list)
    init_mesh: MeshField | None = None


# ---------------------------------------------------------------------------
# cuboid surface meshes
# ---------------------------------------------------------------------------

def _box_grid(lo, hi, target_edge):
    """Surface triangulation of an axis-aligned box, faces subdivided so
    no edge exceeds target_edge.  Shared box edges are welded exactly."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    verts = []
    faces = []
    # (fixed axis, held value, u axis, v axis, outward flip)
    sides = [
        (0, lo[0], 1, 2, True), (0, hi[0], 1, 2, False),
        (1, lo[1], 0, 2, False), (1, hi[1], 0, 2, True),
        (2, lo[2], 0, 1, True), (2, hi[2], 0, 1, False),
    ]
    for axis, value, ua, va, flip in sides:
        nu = max(1, int(np.ceil((hi[ua] - lo[ua]) / target_edge)))
        nv = max(1, int(np.ceil((hi[va] - lo[va]) / target_edge)))
        us = np.linspace(lo[ua], hi[ua], nu + 1)
        vs = np.linspace(lo[va], hi[va], nv + 1)
        base = len(verts)
        for u in us:
            for v in vs:
                p = np.empty(3)
                p[axis] = value
                p[ua] = u
                p[va] = v
                verts.append(p)
        for i in range(nu):
            for j in range(nv):
                a = base + i * (nv + 1) + j
                b = a + nv + 1
                tri1 = (a, b, a + 1)
                tri2 = (a + 1, b, b + 1)
                if flip:
                    tri1 = tri1[::-1]
                    tri2 = tri2[::-1]
                faces.append(tri1)
                faces.append(tri2)
    verts = np.array(verts)
    faces = np.array(faces, dtype=np.int64)
    # weld duplicated corner/edge vertices; grid samples on shared box
    # edges are exact linspace endpoints so bitwise comparison suffices
    uniq, inverse = np.unique(verts, axis=0, return_inverse=True)
    faces = inverse[faces]
    return uniq, faces


_TEMPLATE_BUILDERS = {}


def _template(name):
    def wrap(fn):
        _TEMPLATE_BUILDERS[name] = fn
        return fn
    return wrap


@_template("hinged_box")
def _hinged_box():
    boxes = [
        ((-0.30, -0.25, 0.00), (0.30, 0.25, 0.30)),
        ((-0.30, -0.25, 0.30), (0.30, 0.25, 0.36)),
    ]
    joints = [
        dict(joint_type=REVOLUTE, axis=(1.0, 0.0, 0.0),
             pivot=(0.0, -0.25, 0.30), range=np.deg2rad(100.0)),
    ]
    return boxes, joints


@_template("drawer_cabinet")
def _drawer_cabinet():
    boxes = [
        ((-0.30, -0.30, 0.00), (0.30, 0.30, 0.50)),
        ((-0.24, -0.24, 0.30), (0.24, 0.36, 0.44)),
    ]
    joints = [
        dict(joint_type=PRISMATIC, axis=(0.0, 1.0, 0.0),
             pivot=(0.0, 0.0, 0.0), range=0.35),
    ]
    return boxes, joints


@_template("multi_drawer")
def _multi_drawer():
    boxes = [
        ((-0.30, -0.30, 0.00), (0.30, 0.30, 0.60)),
        ((-0.24, -0.24, 0.08), (0.24, 0.36, 0.26)),
        ((-0.24, -0.24, 0.34), (0.24, 0.36, 0.52)),
    ]
    joints = [
        dict(joint_type=PRISMATIC, axis=(0.0, 1.0, 0.0),
             pivot=(0.0, 0.0, 0.0), range=0.35),
        dict(joint_type=PRISMATIC, axis=(0.0, 1.0, 0.0),
             pivot=(0.0, 0.0, 0.0), range=0.24),
    ]
    return boxes, joints


@_template("door_drawer")
def _door_drawer():
    boxes = [
        ((-0.35, -0.30, 0.00), (0.35, 0.30, 0.60)),
        ((-0.33, 0.30, 0.05), (-0.02, 0.34, 0.55)),
        ((0.04, -0.24, 0.10), (0.31, 0.36, 0.26)),
        ((0.04, -0.24, 0.34), (0.31, 0.36, 0.50)),
    ]
    joints = [
        dict(joint_type=REVOLUTE, axis=(0.0, 0.0, 1.0),
             pivot=(-0.33, 0.32, 0.30), range=np.deg2rad(100.0)),
        dict(joint_type=PRISMATIC, axis=(0.0, 1.0, 0.0),
             pivot=(0.0, 0.0, 0.0), range=0.30),
        dict(joint_type=PRISMATIC, axis=(0.0, 1.0, 0.0),
             pivot=(0.0, 0.0, 0.0), range=0.22),
    ]
    return boxes, joints


def template_part_count(template: str) -> int:
    if template not in _TEMPLATE_BUILDERS:
        raise ValueError(f"unknown template {template!r}")
    _, joints = _TEMPLATE_BUILDERS[template]()
    return len(joints) + 1


def _assemble_template(spec: SceneSpec, rng: np.random.Generator):
    """Template-pose mesh (all parts at q=0) plus the joint table."""
    boxes, joint_rows = _TEMPLATE_BUILDERS[spec.template]()
    all_pos = []
    all_faces = []
    labels = []
    offset = 0
    for part, (lo, hi) in enumerate(boxes):
        verts, faces = _box_grid(lo, hi, spec.target_edge)
        all_pos.append(verts)
        all_faces.append(faces + offset)
        labels.append(np.full(verts.shape[0], part, dtype=np.int64))
        offset += verts.shape[0]
    positions = np.concatenate(all_pos, axis=0)
    faces = np.concatenate(all_faces, axis=0)
    labels = np.concatenate(labels, axis=0)

    num_parts = len(boxes)
    colors = np.empty((positions.shape[0], 3))
    for part in range(num_parts):
        base = _PALETTE[part % len(_PALETTE)]
        tint = 0.5 + spec.albedo_contrast * (base - 0.5)
        tint = tint + rng.uniform(-0.04, 0.04, size=3)
        colors[labels == part] = tint
    if spec.shading_amplitude > 0.0:
        span = positions.max(axis=0) - positions.min(axis=0)
        span[span == 0.0] = 1.0
        rel = (positions - positions.min(axis=0)) / span
        drift = rel @ np.array([0.35, 0.45, 0.55])
        colors = colors + spec.shading_amplitude * (drift - drift.mean())[:, None]
    colors = np.clip(colors, 0.05, 0.95)

    logits = np.zeros((positions.shape[0], num_parts))
    logits[np.arange(positions.shape[0]), labels] = 10.0
    mesh = MeshField(
        positions=positions,
        faces=faces,
        colors=colors[:, None, :],
        opacities=np.ones(positions.shape[0]),
        part_logits=logits,
    )
    return mesh, joint_rows


def _pose_mesh(template_mesh: MeshField, gt_joints: list, q: float) -> MeshField:
    posed = template_mesh.copy()
    joints = [j.pose_joint(q) for j in gt_joints]
    posed.positions = transport_points(
        template_mesh.positions, template_mesh.part_labels(), joints, +1
    )
    return posed


# ---------------------------------------------------------------------------
# cameras and rendering
# ---------------------------------------------------------------------------

def _cap_cameras(spec, center, diag, count, rng):
    radius = spec.camera_radius
    if radius is None:
        radius = 1.7 * diag
    focal = 0.55 * spec.image_size * (radius - 0.5 * diag) / (0.5 * diag)
    cams = []
    for _ in range(count):
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        polar = rng.uniform(np.deg2rad(30.0), np.deg2rad(70.0))
        offset = radius * np.array(
            [
                np.sin(polar) * np.cos(azimuth),
                np.sin(polar) * np.sin(azimuth),
                np.cos(polar),
            ]
        )
        cams.append(
            PinholeCamera.look_at(
                eye=center + offset,
                target=center,
                up=np.array([0.0, 0.0, 1.0]),
                fx=focal, fy=focal,
                cx=spec.image_size / 2.0, cy=spec.image_size / 2.0,
                width=spec.image_size, height=spec.image_size,
            )
        )
    return cams


def render_ground_truth_view(mesh: MeshField, camera: PinholeCamera,
                             state: int, split: str) -> CameraView:
    """Exact RGB-D plus part labels from the hard rasterizer path."""
    extras = np.zeros((mesh.num_vertices, mesh.part_logits.shape[1]))
    extras[np.arange(mesh.num_vertices), mesh.part_labels()] = 1.0
    cfg = RenderConfig(hard=True, background=np.zeros(3))
    result = render(
        camera, mesh.positions, mesh.faces, mesh.base_color(),
        mesh.opacities, extras=extras, config=cfg,
    )
    return CameraView(
        camera=camera,
        image=result.image,
        depth=result.depth,
        labels=segmentation_map(result),
        state=state,
        split=split,
    )


# ---------------------------------------------------------------------------
# initialization noise
# ---------------------------------------------------------------------------

def perturb_for_init(mesh: MeshField, noise_sigma: float, seed: int = 0) -> MeshField:
    """Copy of mesh with Gaussian position noise; sigma 0 is the identity."""
    if noise_sigma < 0.0:
        raise ValueError("noise_sigma must be non-negative")
    out = mesh.copy()
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        out.positions = out.positions + rng.normal(
            0.0, noise_sigma, size=out.positions.shape
        )
    return out


def make_init_mesh(gt_mesh: MeshField, num_parts: int, noise_sigma: float,
                   seed: int) -> MeshField:
    """Fitting start point: jittered geometry, flat gray, uninformed parts."""
    noisy = perturb_for_init(gt_mesh, noise_sigma, seed=seed)
    n = noisy.num_vertices
    return MeshField(
        positions=noisy.positions,
        faces=noisy.faces.copy(),
        colors=np.full((n, 1, 3), 0.5),
        opacities=np.full(n, 0.8),
        part_logits=np.zeros((n, num_parts)),
    )


# ---------------------------------------------------------------------------
# scene assembly
# ---------------------------------------------------------------------------

def generate_scene(spec: SceneSpec) -> Scene:
    """Build geometry, ground truth, observations, and the init mesh.

    Everything is driven by spec.seed, so equal specs give bitwise equal
    scenes.  The end-state mesh is produced by transporting the start
    state through the exact relative joints, which keeps the two states
    consistent to machine precision.
    """
    rng = np.random.default_rng(spec.seed)
    q_start = spec.q_start
    q_end = spec.q_end
    # draw both regardless of overrides to keep the rng stream fixed
    draw_s, draw_e = rng.uniform(0.60, 0.80), rng.uniform(0.20, 0.40)
    if q_start is None:
        q_start = float(draw_s)
    if q_end is None:
        q_end = float(draw_e)

    template_mesh, joint_rows = _assemble_template(spec, rng)
    gt_joints = [
        GTJoint(
            joint_type=row["joint_type"],
            axis=np.asarray(row["axis"], dtype=np.float64),
            pivot=np.asarray(row["pivot"], dtype=np.float64),
            range=float(row["range"]),
            q_start=q_start,
            q_end=q_end,
        )
        for row in joint_rows
    ]

    mesh_start = _pose_mesh(template_mesh, gt_joints, q_start)
    relative = [j.relative_joint() for j in gt_joints]
    mesh_end = mesh_start.copy()
    mesh_end.positions = transport_points(
        mesh_start.positions, mesh_start.part_labels(), relative, +1
    )
    gt = GroundTruth(
        template=spec.template, joints=gt_joints,
        mesh_start=mesh_start, mesh_end=mesh_end,
    )

    lo = np.minimum(mesh_start.positions.min(axis=0), mesh_end.positions.min(axis=0))
    hi = np.maximum(mesh_start.positions.max(axis=0), mesh_end.positions.max(axis=0))
    center = 0.5 * (lo + hi)
    diag = float(np.linalg.norm(hi - lo))

    views = []
    for state, mesh in ((0, mesh_start), (1, mesh_end)):
        cams = _cap_cameras(spec, center, diag, spec.n_train + spec.n_test, rng)
        for i, cam in enumerate(cams):
            split = "train" if i < spec.n_train else "test"
            views.append(render_ground_truth_view(mesh, cam, state, split))

    noise = spec.init_noise
    if noise is None:
        noise = 0.01 * mesh_start.bbox_diagonal()
    init_mesh = make_init_mesh(mesh_start, gt.num_parts, noise, seed=spec.seed + 1)
    return Scene(spec=spec, gt=gt, views=views, init_mesh=init_mesh)
