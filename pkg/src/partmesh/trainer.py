"""Two-phase fitting: per-state reconstruction, then joint articulation.

Phase 1 (reconstruction) optimizes each state's mesh against that state's
views: vertex positions, colors, opacities and part logits under the
photometric + depth + part-label objective. Near the end of the phase the
part labels are hardened, each part is remeshed, and a short fixed-topology
recovery window refines positions and appearance.

Phase 2 (articulation) freezes both meshes entirely and optimizes one
rigid joint per movable part. The first half runs a head-to-head
competition: a revolute candidate and a prismatic candidate per part,
stepped on alternating iterations under the forward pixel loss. At the
halfway point a bake-off renders each candidate in isolation and scores
it on the ground-truth part mask; the winner's type becomes the joint's
type, its parameters are kept, Adam moments reset, and the losing motion
component is zeroed and frozen. The second half adds the vertex-wise
consistency losses, and the backward (second-state to first-state) pixel
loss joins after a configurable delay.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, fields as dataclass_fields

import numpy as np
from scipy.spatial import cKDTree

from . import losses, raster
from .articulation import (
    FREE,
    PRISMATIC,
    REVOLUTE,
    Joint,
    identity_joint,
    pca_seed_joint,
    transport_gradients,
    transport_points,
)
from .bvh import TriangleBVH
from .geometry import rotvec_to_matrix
from .meshfield import MeshField, softmax_rows
from .remesh import RemeshConfig, remesh_all

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Adam:
    """Plain Adam for one parameter array, moments kept as arrays."""

    def __init__(self, lr: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def reset(self):
        self.m = None
        self.v = None
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float | None = None) -> None:
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        param -= (self.lr if lr is None else lr) * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainConfig:
    """Schedule, learning rates and switches for the whole fit.

    Iteration counts default to the desk scale (4000 total, half for
    reconstruction); the fractions place the remaining events relative to
    their phase and survive rescaling T.
    """

    total_iterations: int = 4000
    recon_split: int = 2000
    recovery_fraction: float = 0.1
    bake_off_fraction: float = 0.5
    vertex_loss_fraction: float = 0.5
    backward_pixel_fraction: float = 0.625
    lr_rotation: float = 8e-3
    lr_translation: float = 1e-3
    lr_pivot: float = 1e-4
    lr_logits: float = 5e-3
    lr_color: float = 1.6e-3
    lr_opacity: float = 3e-2
    lr_position_start: float = 2e-4
    lr_position_end: float = 2e-6
    seed: int = 0
    gamma: float = 1.0
    background: tuple = (0.0, 0.0, 0.0)
    densify: bool = False
    densify_error_threshold: float = 0.05
    use_backward_pass: bool = True
    use_vertex_color: bool = True
    use_vertex_opacity: bool = True
    part_aware_matching: bool = True
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    remesh: RemeshConfig = field(default_factory=RemeshConfig)

    def __post_init__(self):
        if not 0 < self.recon_split < self.total_iterations:
            raise ValueError("recon_split must lie strictly inside the run")
        for frac in (self.recovery_fraction, self.bake_off_fraction,
                     self.vertex_loss_fraction, self.backward_pixel_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ValueError("schedule fractions must be in [0, 1]")

    def raster_config(self) -> raster.RenderConfig:
        return raster.RenderConfig(gamma=self.gamma, background=tuple(self.background))

    # schedule landmarks, all absolute iteration indices
    @property
    def remesh_iteration(self) -> int:
        return self.recon_split - int(round(self.recovery_fraction * self.recon_split))

    @property
    def articulation_length(self) -> int:
        return self.total_iterations - self.recon_split

    @property
    def bake_off_iteration(self) -> int:
        return self.recon_split + int(round(self.bake_off_fraction * self.articulation_length))

    @property
    def vertex_loss_iteration(self) -> int:
        return self.recon_split + int(round(self.vertex_loss_fraction * self.articulation_length))

    @property
    def backward_pixel_iteration(self) -> int:
        return self.recon_split + int(
            round(self.backward_pixel_fraction * self.articulation_length)
        )

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        """Build a config from flat string key/value pairs.

        Keys are field names; nested loss weights and remesh settings use
        the prefixes ``weights_`` and ``remesh_`` (e.g. weights_rgb=0.8).
        """
        kwargs = {}
        w_kwargs = {}
        r_kwargs = {}
        simple = {f.name: f for f in dataclass_fields(cls)
                  if f.name not in ("weights", "remesh")}
        w_fields = {f.name: f for f in dataclass_fields(losses.LossWeights)}
        r_fields = {f.name: f for f in dataclass_fields(RemeshConfig)}
        for key, raw in data.items():
            if key.startswith("weights_") and key[len("weights_"):] in w_fields:
                w_kwargs[key[len("weights_"):]] = _parse_value(raw)
            elif key.startswith("remesh_") and key[len("remesh_"):] in r_fields:
                r_kwargs[key[len("remesh_"):]] = _parse_value(raw)
            elif key in simple:
                kwargs[key] = _parse_value(raw, simple[key].type)
            else:
                raise KeyError(f"unknown config key {key!r}")
        if w_kwargs:
            kwargs["weights"] = losses.LossWeights(**w_kwargs)
        if r_kwargs:
            kwargs["remesh"] = RemeshConfig(**r_kwargs)
        return cls(**kwargs)


def _parse_value(raw, hint=None):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if "," in s:
        return tuple(float(p) for p in s.split(","))
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


@dataclass
class FitResult:
    mesh_first: MeshField
    mesh_second: MeshField
    joints: list
    active_parts: list
    bake_off: dict
    loss_log: list
    mesh_hashes: list
    seconds: float
    config: TrainConfig
    # snapshots taken at the reconstruction/articulation boundary
    recon_first: MeshField | None = None
    recon_second: MeshField | None = None


class Trainer:
    """Owns the two per-state meshes, the joints, and all optimizer state."""

    def __init__(self, init_mesh: MeshField, views: list, cfg: TrainConfig):
        v1 = [v for v in views if v.state == 0 and v.split == "train"]
        v2 = [v for v in views if v.state == 1 and v.split == "train"]
        if not v1 or not v2:
            raise ValueError("need at least one training view per state")
        self.views = (v1, v2)
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.meshes = [init_mesh.copy(), init_mesh.copy()]
        self.raster_cfg = cfg.raster_config()
        self.loss_log = []
        self.mesh_hashes = []
        self.bake_off_record = {}
        self.joints = []
        self.active_parts = []
        self._mesh_opt = [self._make_mesh_optimizers(m) for m in self.meshes]
        self._logits_frozen = False
        self._positions_frozen = False
        self._matchers = None
        self._ema = {"revolute": None, "prismatic": None}
        self.capture_record = {}

    # ------------------------------------------------------------------
    # reconstruction phase
    # ------------------------------------------------------------------

    def _make_mesh_optimizers(self, mesh: MeshField) -> dict:
        cfg = self.cfg
        return {
            "positions": Adam(cfg.lr_position_start),
            "colors": Adam(cfg.lr_color),
            "opacities": Adam(cfg.lr_opacity),
            "part_logits": Adam(cfg.lr_logits),
        }

    def _position_lr(self, it: int) -> float:
        cfg = self.cfg
        frac = min(it / cfg.recon_split, 1.0)
        return cfg.lr_position_start * (cfg.lr_position_end / cfg.lr_position_start) ** frac

    def _recon_step(self, it: int, state: int) -> dict:
        mesh = self.meshes[state]
        views = self.views[state]
        view = views[int(self.rng.integers(len(views)))]
        probs = softmax_rows(mesh.part_logits)
        res = raster.render(
            view.camera,
            mesh.positions,
            mesh.faces,
            mesh.base_color(),
            mesh.opacities,
            extras=probs,
            config=self.raster_cfg,
        )
        total, comps, grads = losses.reconstruction_loss(res, view, self.cfg.weights)
        if not np.isfinite(total):
            raise RuntimeError(f"reconstruction loss diverged at iteration {it}")
        back = res.backward(
            grad_image=grads.get("grad_image"),
            grad_depth=grads.get("grad_depth"),
            grad_extras=grads.get("grad_extras"),
            grad_alpha=grads.get("grad_alpha"),
        )
        opt = self._mesh_opt[state]
        if not self._positions_frozen:
            opt["positions"].step(mesh.positions, back["positions"], lr=self._position_lr(it))
        opt["colors"].step(mesh.colors[:, 0, :], back["colors"])
        opt["opacities"].step(mesh.opacities, back["opacities"])
        np.clip(mesh.opacities, 0.0, 1.0, out=mesh.opacities)
        if not self._logits_frozen and "extras" in back:
            gp = back["extras"]
            # chain through the per-vertex softmax
            g_logits = probs * (gp - np.einsum("vk,vk->v", gp, probs)[:, None])
            opt["part_logits"].step(mesh.part_logits, g_logits)
        comps["total"] = total
        return comps

    def run_reconstruction_phase(self) -> None:
        cfg = self.cfg
        for it in range(cfg.recon_split):
            if cfg.densify and it == cfg.recon_split // 4:
                self._densify(it)
            if it == cfg.remesh_iteration:
                self._remesh(it)
            for state in (0, 1):
                comps = self._recon_step(it, state)
                row = {"iteration": it, "phase": "reconstruction", "state": state}
                row.update(comps)
                self.loss_log.append(row)
        self._positions_frozen = True

    def _remesh(self, it: int) -> None:
        self._logits_frozen = True
        for state in (0, 1):
            mesh = self.meshes[state]
            keep = free_space_keep_mask(mesh, self.views[state])
            if not keep.all():
                mesh = mesh.subset(keep)
                # vertex count changed; stale moments no longer line up
                self._mesh_opt[state] = self._make_mesh_optimizers(mesh)
            self.meshes[state] = remesh_all(mesh, self.cfg.remesh)
        self.loss_log.append({"iteration": it, "phase": "remesh"})

    def _densify(self, it: int) -> None:
        for state in (0, 1):
            mesh, grew = densify_by_error(
                self.meshes[state],
                self.views[state],
                self.raster_cfg,
                self.cfg.densify_error_threshold,
            )
            if grew:
                self.meshes[state] = mesh
                # vertex count changed; stale moments no longer line up
                self._mesh_opt[state] = self._make_mesh_optimizers(mesh)
        self.loss_log.append({"iteration": it, "phase": "densify"})

    # ------------------------------------------------------------------
    # articulation phase
    # ------------------------------------------------------------------

    def seed_articulation(self) -> None:
        m1, m2 = self.meshes
        lab1 = m1.part_labels()
        lab2 = m2.part_labels()
        k_total = m1.num_parts
        self.joints = []
        self.active_parts = []
        self._candidates = []
        for part in range(1, k_total):
            in1 = np.nonzero(lab1 == part)[0]
            in2 = np.nonzero(lab2 == part)[0]
            if in1.size == 0 or in2.size == 0:
                warnings.warn(f"part {part} is missing from one state; kept static")
                self.joints.append(identity_joint())
                self.active_parts.append(False)
                self._candidates.append(None)
                continue
            seed = pca_seed_joint(m1.positions[in1], m2.positions[in2])
            self.joints.append(seed)
            self.active_parts.append(True)
            rev = Joint(
                rotvec=seed.rotvec.copy(),
                pivot=seed.pivot.copy(),
                joint_type=REVOLUTE,
            ).canonicalize()
            pri = Joint(
                translation=seed.translation.copy(),
                joint_type=PRISMATIC,
            ).canonicalize()
            self._candidates.append(
                {
                    REVOLUTE: {"joint": rev, "opt": self._make_joint_optimizers()},
                    PRISMATIC: {"joint": pri, "opt": self._make_joint_optimizers()},
                }
            )
        self._joint_opt = [self._make_joint_optimizers() for _ in self.joints]

    def _make_joint_optimizers(self) -> dict:
        cfg = self.cfg
        return {
            "rotvec": Adam(cfg.lr_rotation),
            "pivot": Adam(cfg.lr_pivot),
            "translation": Adam(cfg.lr_translation),
        }

    def _part_surface_cloud(self, state: int, part: int,
                            max_points: int = 1500) -> np.ndarray:
        """World-space surface samples of one part, straight from the data.

        Every pixel the segmentation assigns to the part carries an observed
        depth; backprojecting those pixels yields exact samples of the part's
        visible surface, untouched by reconstruction artifacts. Views without
        depth contribute nothing. Large clouds are thinned with an even,
        deterministic stride.
        """
        pts = []
        for view in self.views[state]:
            depth = getattr(view, "depth", None)
            labels = getattr(view, "labels", None)
            if depth is None or labels is None:
                continue
            mask = (labels == part) & (depth > 0)
            if not np.any(mask):
                continue
            iy, ix = np.nonzero(mask)
            rays = view.camera.ray_directions(ix + 0.5, iy + 0.5)
            cam_pts = rays * depth[iy, ix][:, None]
            pts.append((cam_pts - view.camera.translation) @ view.camera.rotation)
        if not pts:
            return np.zeros((0, 3))
        cloud = np.concatenate(pts)
        if cloud.shape[0] > max_points:
            stride = np.linspace(0, cloud.shape[0] - 1, max_points)
            cloud = cloud[stride.astype(np.int64)]
        return cloud

    def _capture_part_motion(self, n_angles: int = 71) -> None:
        """Warm-start each candidate from the depth-witnessed part surfaces.

        The pixel loss is nearly flat around the identity, so gradient steps
        alone cannot open a hinge by tens of degrees, and reconstruction
        clouds can carry stray geometry that drags centroids. The observed
        depth and segmentation give artifact-free surface samples of every
        part in both states, so the motion is read off the data instead:
        sweep the hinge angle about the seeded axis on a coarse grid, carry
        the first-state cloud's centroid onto the second's (exact for any
        rigid motion whatever the pivot), and score the symmetric mean
        nearest-neighbor distance between the swept and observed clouds. A
        minimum away from zero that beats the identity decisively restarts
        the hinge candidate there, with the pivot recovered from the
        least-squares solution of (I - R) p = c2 - R c1 and the angle
        polished by parabolic interpolation on the grid. The same clouds
        re-anchor the slider candidate's translation. A sliding part stays
        safe: the centroid carry already explains the slide at angle zero,
        any added rotation only hurts, so its sweep keeps the identity and
        the guard leaves the hinge seed alone.
        """
        self.capture_record = {}
        for part_idx, cand in enumerate(self._candidates):
            if cand is None:
                continue
            part = part_idx + 1
            s0 = self._part_surface_cloud(0, part)
            s1 = self._part_surface_cloud(1, part)
            if s0.shape[0] < 20 or s1.shape[0] < 20:
                continue
            c1 = s0.mean(axis=0)
            c2 = s1.mean(axis=0)
            # slider: the centroid shift of the witnessed surfaces is the
            # best data-driven estimate of the slide
            pri = cand[PRISMATIC]["joint"]
            pri.translation[:] = c2 - c1
            pri.canonicalize()
            cand[PRISMATIC]["opt"] = self._make_joint_optimizers()

            rev = cand[REVOLUTE]["joint"]
            axis = rev.axis()
            tree1 = cKDTree(s1)
            centered = s0 - c1

            def pose_score(rot: np.ndarray) -> float:
                moved = centered @ rot.T + c2
                fwd = tree1.query(moved)[0].mean()
                bwd = cKDTree(moved).query(s1)[0].mean()
                return float(fwd + bwd)

            thetas = np.linspace(-1.75, 1.75, n_angles)
            scores = np.array(
                [pose_score(rotvec_to_matrix(axis * t)) for t in thetas]
            )
            best_i = int(np.argmin(scores))
            best_theta = float(thetas[best_i])
            best_score = float(scores[best_i])
            identity_score = pose_score(np.eye(3))
            if 0 < best_i < n_angles - 1:
                lo, mid, hi = scores[best_i - 1], scores[best_i], scores[best_i + 1]
                denom = lo - 2.0 * mid + hi
                if denom > 1e-18:
                    step = float(thetas[1] - thetas[0])
                    refined = best_theta + 0.5 * step * float(lo - hi) / float(denom)
                    refined_score = pose_score(rotvec_to_matrix(axis * refined))
                    if refined_score < best_score:
                        best_theta, best_score = refined, refined_score
            self.capture_record[part] = {
                "angle": best_theta,
                "score": best_score,
                "identity_score": identity_score,
            }
            if abs(best_theta) < 0.05 or best_score > 0.5 * identity_score:
                continue
            best_rot = rotvec_to_matrix(axis * best_theta)
            t_net = c2 - best_rot @ c1
            pivot, *_ = np.linalg.lstsq(np.eye(3) - best_rot, t_net, rcond=None)
            # the pivot's component along the axis is unconstrained; keep it
            # at the part's own height on that axis
            pivot = pivot + axis * float(axis @ (c1 - pivot))
            rev.rotvec[:] = axis * best_theta
            rev.pivot[:] = pivot
            rev.translation[:] = 0.0
            rev.canonicalize()
            cand[REVOLUTE]["opt"] = self._make_joint_optimizers()

    def _candidate_joints(self, kind: str) -> list:
        out = []
        for part_idx, cand in enumerate(self._candidates):
            if cand is None:
                out.append(identity_joint())
            else:
                out.append(cand[kind]["joint"])
        return out

    def _pixel_step(self, source_state: int, joints: list, direction: int):
        """Forward or backward pixel loss against one random opposite view."""
        src = self.meshes[source_state]
        tgt_views = self.views[1 - source_state]
        view = tgt_views[int(self.rng.integers(len(tgt_views)))]
        value, grads = losses.pixel_consistency_loss(
            src, joints, direction, [view], self.raster_cfg, self.cfg.weights
        )
        return value, grads

    def _step_joints(self, joints: list, opts: list, grads: list) -> None:
        for joint, opt, g in zip(joints, opts, grads):
            if g is None:
                continue
            opt["rotvec"].step(joint.rotvec, g["rotvec"])
            opt["pivot"].step(joint.pivot, g["pivot"])
            opt["translation"].step(joint.translation, g["translation"])
            joint.canonicalize()

    def run_candidate_alternation(self, rel: int, it: int) -> None:
        kind = REVOLUTE if rel % 2 == 0 else PRISMATIC
        joints = self._candidate_joints(kind)
        value, grads = self._pixel_step(0, joints, +1)
        if not np.isfinite(value):
            raise RuntimeError(f"candidate loss diverged at iteration {it}")
        part_grads = []
        opts = []
        for cand, g in zip(self._candidates, grads):
            if cand is None:
                part_grads.append(None)
                opts.append(self._make_joint_optimizers())
                continue
            part_grads.append(g)
            opts.append(cand[kind]["opt"])
        self._step_joints(joints, opts, part_grads)
        prev = self._ema[kind]
        self._ema[kind] = value if prev is None else 0.95 * prev + 0.05 * value
        self.loss_log.append(
            {"iteration": it, "phase": "alternation", "candidate": kind,
             "pixel_forward": value, "ema": self._ema[kind]}
        )

    def bake_off(self, it: int) -> None:
        """Pick each part's joint type from isolated masked renders."""
        m1 = self.meshes[0]
        diag = m1.bbox_diagonal()
        views2 = self.views[1]
        colors = m1.base_color()
        record = {}
        for part_idx, cand in enumerate(self._candidates):
            part = part_idx + 1
            if cand is None:
                record[part] = {"type": None, "reason": "inactive"}
                continue
            scores = {}
            masked_pixels = 0
            for kind in (REVOLUTE, PRISMATIC):
                probe = [identity_joint() for _ in self._candidates]
                probe[part_idx] = cand[kind]["joint"]
                moved = transport_points(m1.positions, m1.part_labels(), probe, +1)
                err_sum = 0.0
                err_n = 0
                for view in views2:
                    mask = view.labels == part
                    n = int(mask.sum())
                    if n == 0:
                        continue
                    res = raster.render(
                        view.camera, moved, m1.faces, colors, m1.opacities,
                        config=self.raster_cfg,
                    )
                    err_sum += float(np.abs(res.image - view.image)[mask].sum())
                    err_n += n * 3
                scores[kind] = err_sum / err_n if err_n else np.inf
                masked_pixels = max(masked_pixels, err_n)
            if masked_pixels == 0:
                rev_mag = cand[REVOLUTE]["joint"].angle() / (np.pi / 2.0)
                pri_mag = float(
                    np.linalg.norm(cand[PRISMATIC]["joint"].translation)
                ) / (0.5 * diag)
                winner = REVOLUTE if rev_mag >= pri_mag else PRISMATIC
                record[part] = {
                    "type": winner,
                    "reason": "no masked pixels; 3d magnitude fallback",
                    "revolute_magnitude": rev_mag,
                    "prismatic_magnitude": pri_mag,
                }
            else:
                winner = REVOLUTE if scores[REVOLUTE] <= scores[PRISMATIC] else PRISMATIC
                record[part] = {
                    "type": winner,
                    "revolute_loss": scores[REVOLUTE],
                    "prismatic_loss": scores[PRISMATIC],
                    "ema_revolute": self._ema[REVOLUTE],
                    "ema_prismatic": self._ema[PRISMATIC],
                }
            self.joints[part_idx] = cand[winner]["joint"].copy().canonicalize()
            self._joint_opt[part_idx] = self._make_joint_optimizers()
        self.bake_off_record = record
        self.loss_log.append({"iteration": it, "phase": "bake_off"})

    def _accumulate(self, totals: list, grads: list, scale: float) -> None:
        for t, g in zip(totals, grads):
            if g is None:
                continue
            for key in ("rotvec", "pivot", "translation"):
                t[key] += scale * g[key]

    def run_articulation_iteration(self, rel: int, it: int) -> None:
        cfg = self.cfg
        w = cfg.weights
        log = {"iteration": it, "phase": "articulation"}
        totals = [
            {"rotvec": np.zeros(3), "pivot": np.zeros(3), "translation": np.zeros(3)}
            if active else None
            for active in self.active_parts
        ]

        val_f, grads_f = self._pixel_step(0, self.joints, +1)
        self._accumulate(totals, grads_f, w.pixel_motion)
        log["pixel_forward"] = val_f
        total = w.pixel_motion * val_f

        if cfg.use_backward_pass and it >= cfg.backward_pixel_iteration:
            val_b, grads_b = self._pixel_step(1, self.joints, -1)
            self._accumulate(totals, grads_b, w.pixel_motion)
            log["pixel_backward"] = val_b
            total += w.pixel_motion * val_b

        if it >= cfg.vertex_loss_iteration:
            if self._matchers is None:
                self._matchers = (
                    losses.VertexMatcher(self.meshes[0]),
                    losses.VertexMatcher(self.meshes[1]),
                )
            vf, gf, _ = losses.vertex_consistency_loss(
                self.meshes[0], self.meshes[1], self._matchers[1], self.joints, +1,
                w, part_aware=cfg.part_aware_matching,
                use_color=cfg.use_vertex_color, use_opacity=cfg.use_vertex_opacity,
            )
            self._accumulate(totals, gf, w.vertex_motion)
            log["vertex_forward"] = vf
            total += w.vertex_motion * vf
            if cfg.use_backward_pass:
                vb, gb, _ = losses.vertex_consistency_loss(
                    self.meshes[1], self.meshes[0], self._matchers[0], self.joints, -1,
                    w, part_aware=cfg.part_aware_matching,
                    use_color=cfg.use_vertex_color, use_opacity=cfg.use_vertex_opacity,
                )
                self._accumulate(totals, gb, w.vertex_motion)
                log["vertex_backward"] = vb
                total += w.vertex_motion * vb

        if not np.isfinite(total):
            raise RuntimeError(f"motion loss diverged at iteration {it}")
        for g in totals:
            if g is not None and any(
                not np.all(np.isfinite(g[k])) for k in ("rotvec", "pivot", "translation")
            ):
                raise RuntimeError(f"joint gradients diverged at iteration {it}")
        self._step_joints(self.joints, self._joint_opt, totals)
        log["total"] = total
        self.loss_log.append(log)

    def run_articulation_phase(self) -> None:
        cfg = self.cfg
        self.seed_articulation()
        self._capture_part_motion()
        for it in range(cfg.recon_split, cfg.total_iterations):
            rel = it - cfg.recon_split
            if it < cfg.bake_off_iteration:
                self.run_candidate_alternation(rel, it)
            else:
                if it == cfg.bake_off_iteration:
                    self.bake_off(it)
                self.run_articulation_iteration(rel, it)
            self.mesh_hashes.append(
                (it, self.meshes[0].content_hash(), self.meshes[1].content_hash())
            )

    def fit(self) -> FitResult:
        start = time.perf_counter()
        self.run_reconstruction_phase()
        recon_snapshot = (self.meshes[0].copy(), self.meshes[1].copy())
        self.run_articulation_phase()
        return FitResult(
            mesh_first=self.meshes[0],
            mesh_second=self.meshes[1],
            joints=[j.copy() for j in self.joints],
            active_parts=list(self.active_parts),
            bake_off=self.bake_off_record,
            loss_log=self.loss_log,
            mesh_hashes=self.mesh_hashes,
            seconds=time.perf_counter() - start,
            config=self.cfg,
            recon_first=recon_snapshot[0],
            recon_second=recon_snapshot[1],
        )


def fit(init_mesh: MeshField, views: list, cfg: TrainConfig | None = None) -> FitResult:
    """Run the full two-phase optimization and return the fitted scene."""
    return Trainer(init_mesh, views, cfg or TrainConfig()).fit()


# ---------------------------------------------------------------------------
# observed free-space cleanup
# ---------------------------------------------------------------------------

def free_space_keep_mask(
    mesh: MeshField,
    views: list,
    margin_fraction: float = 0.03,
    min_violations: int = 2,
) -> np.ndarray:
    """Flag vertices that float in space the depth maps witnessed as empty.

    A depth pixel testifies that the ray was clear up to the recorded
    surface. A vertex sitting decisively in front of that surface therefore
    cannot be real; reconstruction sometimes parks such ghost geometry over
    regions no camera ever sees against the background, where only depth can
    contradict it. For each view the vertex projects into, compare its
    camera depth against the shallowest valid depth in the 3x3 pixel
    neighbourhood (the minimum forgives silhouette pixels that sampled a
    farther surface). Counting a violation only when the vertex is nearer
    than that by ``margin_fraction`` of the bounding-box diagonal, and
    requiring ``min_violations`` independent views, leaves true surface and
    never-observed interior vertices untouched. Returns a keep mask; all
    true when the views carry no usable depth.
    """
    n = mesh.num_vertices
    keep = np.ones(n, dtype=bool)
    if n == 0:
        return keep
    margin = margin_fraction * mesh.bbox_diagonal()
    violations = np.zeros(n, dtype=np.int64)
    any_depth = False
    for view in views:
        depth = view.depth
        if depth is None or not np.any(depth > 0):
            continue
        any_depth = True
        h, w = depth.shape
        pix, z, in_front = view.camera.project_many(mesh.positions)
        ix = np.floor(pix[:, 0]).astype(np.int64)
        iy = np.floor(pix[:, 1]).astype(np.int64)
        inside = in_front & (ix >= 1) & (ix <= w - 2) & (iy >= 1) & (iy <= h - 2)
        if not np.any(inside):
            continue
        vi = np.nonzero(inside)[0]
        nearest = np.full(vi.size, np.inf)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                d = depth[iy[vi] + dy, ix[vi] + dx]
                nearest = np.where(d > 0, np.minimum(nearest, d), nearest)
        observed = np.isfinite(nearest)
        bad = observed & (z[vi] < nearest - margin)
        violations[vi[bad]] += 1
    if not any_depth:
        return keep
    keep = violations < min_violations
    if int(keep.sum()) < 4:  # degenerate cloud; leave the mesh alone
        return np.ones(n, dtype=bool)
    return keep


# ---------------------------------------------------------------------------
# optional densification
# ---------------------------------------------------------------------------

def densify_by_error(
    mesh: MeshField,
    views: list,
    config: raster.RenderConfig,
    error_threshold: float,
):
    """Split faces whose mean photometric error exceeds the threshold.

    Per view, pixel errors are attributed to the nearest face of the
    back-projected rendered surface point. Each offending face gains a
    centroid vertex (attributes averaged) and splits in three. Returns
    (mesh, grew) where grew says whether anything changed.
    """
    if mesh.num_faces == 0:
        return mesh, False
    err_sum = np.zeros(mesh.num_faces)
    err_cnt = np.zeros(mesh.num_faces)
    tree = TriangleBVH(mesh.positions, mesh.faces)
    for view in views:
        res = raster.render(
            view.camera, mesh.positions, mesh.faces, mesh.base_color(), mesh.opacities,
            config=config,
        )
        err = np.abs(res.image - view.image).mean(axis=2)
        covered = res.alpha > 0.5
        if not np.any(covered):
            continue
        ys, xs = np.nonzero(covered)
        z = res.depth[ys, xs] / res.alpha[ys, xs]
        cam = view.camera
        rays = cam.ray_directions(xs + 0.5, ys + 0.5)
        pts_cam = rays * z[:, None]
        pts = (pts_cam - cam.translation) @ cam.rotation
        fi, _, _, _ = tree.query(pts)
        np.add.at(err_sum, fi, err[ys, xs])
        np.add.at(err_cnt, fi, 1.0)
    seen = err_cnt > 0
    mean_err = np.zeros(mesh.num_faces)
    mean_err[seen] = err_sum[seen] / err_cnt[seen]
    split = np.nonzero(mean_err > error_threshold)[0]
    if split.size == 0:
        return mesh, False

    v0 = mesh.num_vertices
    tri = mesh.faces[split]
    new_pos = mesh.positions[tri].mean(axis=1)
    new_col = mesh.colors[tri].mean(axis=1)
    new_opa = mesh.opacities[tri].mean(axis=1)
    new_log = mesh.part_logits[tri].mean(axis=1)
    new_ids = v0 + np.arange(split.size)
    keep = np.ones(mesh.num_faces, dtype=bool)
    keep[split] = False
    children = np.concatenate(
        [
            np.stack([tri[:, 0], tri[:, 1], new_ids], axis=1),
            np.stack([tri[:, 1], tri[:, 2], new_ids], axis=1),
            np.stack([tri[:, 2], tri[:, 0], new_ids], axis=1),
        ]
    )
    out = MeshField(
        positions=np.concatenate([mesh.positions, new_pos]),
        faces=np.concatenate([mesh.faces[keep], children]),
        colors=np.concatenate([mesh.colors, new_col]),
        opacities=np.concatenate([mesh.opacities, new_opa]),
        part_logits=np.concatenate([mesh.part_logits, new_log]),
    )
    return out, True
