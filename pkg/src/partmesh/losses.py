"""Training objectives: photometric, depth, part-label and motion losses.

All loss functions return both the scalar value and analytic gradients so
the optimizer never needs numerical differentiation. Image-space losses
produce per-pixel gradient buffers shaped like the render outputs; motion
losses produce per-joint parameter gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from . import raster
from .articulation import transport_gradients, transport_points
from .bvh import TriangleBVH
from .meshfield import MeshField

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
CE_EPS = 1e-8
DEPTH_COVERAGE_MIN = 0.2


@dataclass
class LossWeights:
    """Weights of every objective term plus the match validity radius.

    ``match_distance`` of None means 5% of the source mesh bounding-box
    diagonal, resolved where the matching runs.
    """

    rgb: float = 0.8
    ssim: float = 0.2
    depth: float = 0.5
    part: float = 0.1
    color: float = 1.0
    opacity: float = 1.0
    vertex_motion: float = 5e-2
    pixel_motion: float = 5e-2
    match_distance: float | None = None


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


_KERNEL = _gaussian_kernel()


def _blur_valid(x: np.ndarray) -> np.ndarray:
    return convolve2d(x, _KERNEL, mode="valid")


def _blur_adjoint(v: np.ndarray) -> np.ndarray:
    # adjoint of the valid-mode blur; the kernel is symmetric so the
    # transpose operation is a full-mode convolution with the same kernel
    return convolve2d(v, _KERNEL, mode="full")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    value, _ = _ssim_impl(a, b, want_grad=False)
    return value


def ssim_and_grad(a: np.ndarray, b: np.ndarray):
    """SSIM of a against b and the gradient with respect to a."""
    return _ssim_impl(a, b, want_grad=True)


def _ssim_impl(a: np.ndarray, b: np.ndarray, want_grad: bool):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w, nc = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")

    total = 0.0
    grad = np.zeros_like(a) if want_grad else None
    n_windows = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    for ch in range(nc):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _blur_valid(x)
        mu_y = _blur_valid(y)
        var_x = _blur_valid(x * x) - mu_x * mu_x
        var_y = _blur_valid(y * y) - mu_y * mu_y
        cov = _blur_valid(x * y) - mu_x * mu_y
        a1 = 2.0 * mu_x * mu_y + SSIM_C1
        a2 = 2.0 * cov + SSIM_C2
        b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
        b2 = var_x + var_y + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        total += float(s.mean())
        if want_grad:
            wgt = 1.0 / (n_windows * nc)
            d_mu = s * (2.0 * mu_y / a1 - 2.0 * mu_x / b1) * wgt
            d_var = -(s / b2) * wgt
            d_cov = (2.0 * s / a2) * wgt
            # mean/variance/covariance all reach x through the same blur
            grad[:, :, ch] = (
                _blur_adjoint(d_mu - 2.0 * mu_x * d_var - mu_y * d_cov)
                + 2.0 * x * _blur_adjoint(d_var)
                + y * _blur_adjoint(d_cov)
            )
    value = total / nc
    if a.shape[2] == 1 and grad is not None:
        grad = grad[:, :, 0]
    return value, grad


# ---------------------------------------------------------------------------
# elementwise losses
# ---------------------------------------------------------------------------

def l1_and_grad(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None):
    """Mean absolute error and its subgradient with respect to pred.

    With a mask, the mean runs over masked elements only; an all-false
    mask yields loss 0 with zero gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), diff.shape)
        n = int(m.sum())
        if n == 0:
            return 0.0, np.zeros_like(diff)
        value = float(np.abs(diff[m]).sum() / n)
        grad = np.where(m, np.sign(diff) / n, 0.0)
        return value, grad
    n = diff.size
    return float(np.abs(diff).mean()), np.sign(diff) / n


def image_loss_and_grad(pred: np.ndarray, target: np.ndarray, w_rgb: float, w_ssim: float):
    """The shared photometric objective: w_rgb * L1 + w_ssim * (1 - SSIM)."""
    l1, g_l1 = l1_and_grad(pred, target)
    s, g_s = ssim_and_grad(pred, target)
    value = w_rgb * l1 + w_ssim * (1.0 - s)
    grad = w_rgb * g_l1 - w_ssim * g_s
    return value, grad, {"l1": l1, "ssim": s}


def part_cross_entropy(probs: np.ndarray, labels: np.ndarray):
    """Cross-entropy of composited part probabilities against hard labels.

    probs holds the alpha-composited per-pixel part weights (K+1 channels,
    scaled by coverage); labels use -1 for background, which is excluded.
    Each pixel's channel vector renormalizes to a distribution before the
    log, which cancels the coverage scale. Returns (value, dvalue/dprobs).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    kp = probs.shape[-1]
    if labels.max(initial=-1) >= kp:
        raise ValueError("part label exceeds channel count")
    mask = labels >= 0
    n = int(mask.sum())
    grad = np.zeros_like(probs)
    if n == 0:
        return 0.0, grad
    pm = probs[mask]
    lm = labels[mask]
    denom = pm.sum(axis=1) + kp * CE_EPS
    rows = np.arange(pm.shape[0])
    p_true = (pm[rows, lm] + CE_EPS) / denom
    value = float(-np.log(p_true).mean())
    g = np.full_like(pm, 1.0)
    g /= denom[:, None]
    g[rows, lm] -= 1.0 / (pm[rows, lm] + CE_EPS)
    grad[mask] = g / n
    return value, grad


def reconstruction_loss(result: raster.RenderResult, view, weights: LossWeights):
    """Full per-view objective against one ground-truth observation.

    Parameters
    ----------
    result : forward render of the current mesh into the view's camera
    view : object with .image (H, W, 3), .depth (H, W) where 0 marks
        invalid pixels, and .labels (H, W) with -1 background
    weights : term weights

    Returns (total, component dict, gradient dict for result.backward).
    The composited depth underestimates the surface depth wherever
    coverage is below 1, so the depth term compares depth / coverage on
    pixels with coverage above a floor; see the depth handling note in
    the README.
    """
    comps = {}
    grads = {}

    img_val, g_img, img_parts = image_loss_and_grad(
        result.image, view.image, weights.rgb, weights.ssim
    )
    comps["rgb_l1"] = img_parts["l1"]
    comps["ssim"] = img_parts["ssim"]
    grads["grad_image"] = g_img
    total = img_val

    if weights.depth > 0.0:
        valid = (view.depth > 0.0) & (result.alpha > DEPTH_COVERAGE_MIN)
        n = int(valid.sum())
        if n > 0:
            cov = np.where(valid, result.alpha, 1.0)
            d_norm = result.depth / cov
            diff = np.where(valid, d_norm - view.depth, 0.0)
            comps["depth_l1"] = float(np.abs(diff[valid]).mean())
            total += weights.depth * comps["depth_l1"]
            sgn = np.sign(diff) * weights.depth / n
            grads["grad_depth"] = sgn / cov
            grads["grad_alpha"] = -sgn * result.depth / cov**2
        else:
            comps["depth_l1"] = 0.0

    if weights.part > 0.0 and result.extras is not None:
        ce, g_ce = part_cross_entropy(result.extras, view.labels)
        comps["part_ce"] = ce
        total += weights.part * ce
        grads["grad_extras"] = weights.part * g_ce

    return total, comps, grads


# ---------------------------------------------------------------------------
# vertex-wise motion consistency
# ---------------------------------------------------------------------------

class VertexMatcher:
    """Closest-triangle search against a fixed target mesh.

    One BVH per part for part-aware matching, plus one over all faces for
    the global-matching ablation. Parts with no unanimous faces in the
    target produce invalid matches.
    """

    def __init__(self, target: MeshField):
        self.target = target
        self.face_labels = target.face_part_labels()
        self.part_bvh = {}
        for part in range(target.num_parts):
            rows = np.nonzero(self.face_labels == part)[0]
            if rows.size:
                self.part_bvh[part] = (TriangleBVH(target.positions, target.faces[rows]), rows)
        if target.num_faces:
            self.global_bvh = TriangleBVH(target.positions, target.faces)
        else:
            self.global_bvh = None

    def match(
        self,
        points: np.ndarray,
        labels: np.ndarray,
        tau: float,
        part_aware: bool = True,
    ):
        """Match each query point to a target face.

        Returns dict of arrays: face (global target face index, -1 when
        the part has no faces), bary, point (closest point), dist, valid.
        """
        points = np.asarray(points, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        n = points.shape[0]
        face = np.full(n, -1, dtype=np.int64)
        bary = np.zeros((n, 3))
        closest = np.zeros((n, 3))
        dist = np.full(n, np.inf)

        if part_aware:
            for part in np.unique(labels):
                sel = np.nonzero(labels == part)[0]
                entry = self.part_bvh.get(int(part))
                if entry is None:
                    continue
                tree, rows = entry
                fi, cp, cb, d = tree.query(points[sel])
                face[sel] = rows[fi]
                closest[sel] = cp
                bary[sel] = cb
                dist[sel] = d
        elif self.global_bvh is not None:
            fi, cp, cb, d = self.global_bvh.query(points)
            face[:] = fi
            closest[:] = cp
            bary[:] = cb
            dist[:] = d

        valid = (face >= 0) & (dist <= tau)
        return {"face": face, "bary": bary, "point": closest, "dist": dist, "valid": valid}


def _barycentric_position_jacobian(points, tris, bary):
    """d(bary)/d(query point) for closest points on fixed triangles.

    The closest-point map is piecewise smooth; the active piece is read
    off the barycentric pattern (interior, edge, or vertex region, the
    latter contributing zero). Returns (N, 3, 3) with J[n, j] = d bary_j
    / d point_n.
    """
    n = points.shape[0]
    J = np.zeros((n, 3, 3))
    zero = bary == 0.0
    n_zero = zero.sum(axis=1)

    interior = n_zero == 0
    if np.any(interior):
        idx = np.nonzero(interior)[0]
        a, b, c = tris[idx, 0], tris[idx, 1], tris[idx, 2]
        nrm = np.cross(b - a, c - a)
        n2 = np.einsum("ij,ij->i", nrm, nrm)[:, None]
        # in-plane gradients of the linear barycentric functions
        gb = np.cross(nrm, a - c) / n2
        gc = np.cross(nrm, b - a) / n2
        ga = -(gb + gc)
        J[idx, 0] = ga
        J[idx, 1] = gb
        J[idx, 2] = gc

    edge = n_zero == 1
    if np.any(edge):
        idx = np.nonzero(edge)[0]
        miss = np.argmax(zero[idx], axis=1)
        j0 = (miss + 1) % 3
        j1 = (miss + 2) % 3
        a = tris[idx, j0]
        b = tris[idx, j1]
        ab = b - a
        denom = np.einsum("ij,ij->i", ab, ab)[:, None]
        dt = ab / np.maximum(denom, 1e-300)
        rows = np.arange(idx.size)
        J[idx[rows], j0[rows]] = -dt
        J[idx[rows], j1[rows]] = dt

    # vertex regions (two zeros) stay at zero Jacobian
    return J


def vertex_consistency_loss(
    source: MeshField,
    target: MeshField,
    matcher: VertexMatcher,
    joints: list,
    direction: int,
    weights: LossWeights,
    part_aware: bool = True,
    use_color: bool = True,
    use_opacity: bool = True,
):
    """Appearance agreement of transported vertices with the other state.

    Transports every source vertex with its part's joint, finds the
    closest same-part target face, interpolates the target's color and
    opacity there, and penalizes squared disagreement with the source
    vertex's own attributes. The mean runs over all source vertices,
    invalid matches contributing zero. Gradients flow to the joint
    parameters through the transported positions only (matched faces are
    held fixed within the step).

    Returns (value, per-joint gradient list, match stats dict).
    """
    labels = source.part_labels()
    moved = transport_points(source.positions, labels, joints, direction)
    tau = weights.match_distance
    if tau is None:
        tau = 0.05 * source.bbox_diagonal()
    m = matcher.match(moved, labels, tau, part_aware=part_aware)

    n_src = source.num_vertices
    valid = m["valid"]
    grads = [
        {"rotvec": np.zeros(3), "pivot": np.zeros(3), "translation": np.zeros(3)}
        for _ in joints
    ]
    stats = {"n_valid": int(valid.sum()), "n_total": n_src}
    if not np.any(valid):
        return 0.0, grads, stats

    vi = np.nonzero(valid)[0]
    faces = matcher.target.faces[m["face"][vi]]
    tris = matcher.target.positions[faces]
    bary = m["bary"][vi]

    value = 0.0
    d_bary = np.zeros((vi.size, 3))
    if use_color and weights.color > 0.0:
        c_src = source.base_color()[vi]
        c_tgt_corner = matcher.target.base_color()[faces]  # (n, 3, 3)
        c_interp = np.einsum("ni,nic->nc", bary, c_tgt_corner)
        diff = c_interp - c_src
        value += weights.color * float(np.einsum("nc,nc->", diff, diff)) / n_src
        d_interp = 2.0 * weights.color * diff / n_src
        d_bary += np.einsum("nc,nic->ni", d_interp, c_tgt_corner)
    if use_opacity and weights.opacity > 0.0:
        o_src = source.opacities[vi]
        o_tgt_corner = matcher.target.opacities[faces]  # (n, 3)
        o_interp = np.einsum("ni,ni->n", bary, o_tgt_corner)
        diff = o_interp - o_src
        value += weights.opacity * float(diff @ diff) / n_src
        d_bary += (2.0 * weights.opacity / n_src) * diff[:, None] * o_tgt_corner

    J = _barycentric_position_jacobian(moved[vi], tris, bary)  # (n, 3, 3)
    d_moved = np.einsum("nj,njk->nk", d_bary, J)

    lab_v = labels[vi]
    for k, joint in enumerate(joints, start=1):
        sel = lab_v == k
        if not np.any(sel):
            continue
        g = transport_gradients(
            source.positions[vi[sel]], d_moved[sel], joint, direction
        )
        grads[k - 1]["rotvec"] += g["rotvec"]
        grads[k - 1]["pivot"] += g["pivot"]
        grads[k - 1]["translation"] += g["translation"]

    return value, grads, stats


# ---------------------------------------------------------------------------
# pixel-wise motion consistency
# ---------------------------------------------------------------------------

def pixel_consistency_loss(
    source: MeshField,
    joints: list,
    direction: int,
    views,
    config: raster.RenderConfig,
    weights: LossWeights,
):
    """Photometric agreement of the articulated mesh with the other state.

    Transports the source mesh through the joints (forward or backward),
    renders it from each given opposite-state view, and applies the
    shared photometric objective with rgb weight 1 - ssim weight. The
    view average is returned with per-joint parameter gradients.
    """
    if not views:
        raise ValueError("pixel consistency needs at least one view")
    labels = source.part_labels()
    moved = transport_points(source.positions, labels, joints, direction)
    w_ssim = weights.ssim
    w_rgb = 1.0 - w_ssim

    total = 0.0
    grads = [
        {"rotvec": np.zeros(3), "pivot": np.zeros(3), "translation": np.zeros(3)}
        for _ in joints
    ]
    colors = source.base_color()
    for view in views:
        res = raster.render(
            view.camera, moved, source.faces, colors, source.opacities, config=config
        )
        val, g_img, _ = image_loss_and_grad(res.image, view.image, w_rgb, w_ssim)
        total += val
        back = res.backward(grad_image=g_img)
        g_pos = back["positions"]
        for k, joint in enumerate(joints, start=1):
            sel = labels == k
            if not np.any(sel):
                continue
            g = transport_gradients(source.positions[sel], g_pos[sel], joint, direction)
            grads[k - 1]["rotvec"] += g["rotvec"]
            grads[k - 1]["pivot"] += g["pivot"]
            grads[k - 1]["translation"] += g["translation"]

    n = len(views)
    total /= n
    for g in grads:
        for key in ("rotvec", "pivot", "translation"):
            g[key] /= n
    return total, grads


def motion_total(vtx_fwd: float, vtx_bwd: float, pix_fwd: float, pix_bwd: float, weights: LossWeights) -> float:
    """Weighted sum of the four motion-consistency components."""
    return weights.vertex_motion * (vtx_fwd + vtx_bwd) + weights.pixel_motion * (
        pix_fwd + pix_bwd
    )
