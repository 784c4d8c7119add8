"""Loss values against loop references and gradients against finite differences."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from partmesh import losses, raster
from partmesh.articulation import FREE, Joint, identity_joint
from partmesh.geometry import PinholeCamera
from partmesh.losses import (
    LossWeights,
    VertexMatcher,
    image_loss_and_grad,
    l1_and_grad,
    part_cross_entropy,
    pixel_consistency_loss,
    reconstruction_loss,
    ssim,
    ssim_and_grad,
    vertex_consistency_loss,
)
from partmesh.meshfield import MeshField


# ---------------------------------------------------------------------------
# SSIM against an explicit per-window reference
# ---------------------------------------------------------------------------


def reference_ssim(a, b, size=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """Direct windowed SSIM: loop over every window position and channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    g /= g.sum()
    w = np.outer(g, g)

    h_img, w_img, nc = a.shape
    vals = []
    for ch in range(nc):
        for i in range(h_img - size + 1):
            for j in range(w_img - size + 1):
                xa = a[i : i + size, j : j + size, ch]
                xb = b[i : i + size, j : j + size, ch]
                mx = float((w * xa).sum())
                my = float((w * xb).sum())
                vx = float((w * xa * xa).sum()) - mx * mx
                vy = float((w * xb * xb).sum()) - my * my
                cov = float((w * xa * xb).sum()) - mx * my
                vals.append(
                    ((2 * mx * my + c1) * (2 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2))
                )
    return float(np.mean(vals))


def test_ssim_matches_window_reference():
    rng = np.random.default_rng(30)
    a = rng.uniform(0.0, 1.0, size=(16, 14))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0.0, 1.0)
    assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-12)


def test_ssim_matches_window_reference_rgb():
    rng = np.random.default_rng(31)
    a = rng.uniform(0.0, 1.0, size=(13, 15, 3))
    b = rng.uniform(0.0, 1.0, size=(13, 15, 3))
    assert ssim(a, b) == pytest.approx(reference_ssim(a, b), abs=1e-12)


def test_ssim_of_identical_images_is_exactly_one():
    rng = np.random.default_rng(32)
    a = rng.uniform(0.0, 1.0, size=(24, 24, 3))
    assert ssim(a, a) == 1.0  # bitwise, not approximately


def test_ssim_decreases_with_distortion():
    rng = np.random.default_rng(33)
    a = rng.uniform(0.2, 0.8, size=(20, 20))
    mild = ssim(a, np.clip(a + 0.02 * rng.normal(size=a.shape), 0, 1))
    harsh = ssim(a, np.clip(a + 0.3 * rng.normal(size=a.shape), 0, 1))
    assert harsh < mild < 1.0


def test_ssim_input_validation():
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))  # smaller than the window


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(34)
    a = rng.uniform(0.2, 0.8, size=(13, 12))
    b = rng.uniform(0.2, 0.8, size=(13, 12))
    _, grad = ssim_and_grad(a, b)
    h = 1e-6
    for i, j in [(0, 0), (4, 7), (6, 3), (12, 11), (9, 9)]:
        ap, am = a.copy(), a.copy()
        ap[i, j] += h
        am[i, j] -= h
        fd = (ssim(ap, b) - ssim(am, b)) / (2 * h)
        assert grad[i, j] == pytest.approx(fd, abs=1e-7)


# ---------------------------------------------------------------------------
# elementwise losses
# ---------------------------------------------------------------------------


def test_l1_value_and_subgradient():
    pred = np.array([1.0, 2.0, 5.0])
    target = np.array([2.0, 2.0, 3.0])
    val, grad = l1_and_grad(pred, target)
    assert val == pytest.approx(1.0)  # (1 + 0 + 2) / 3
    assert_allclose(grad, [-1 / 3, 0.0, 1 / 3])


def test_l1_masked():
    pred = np.array([[1.0, 9.0], [4.0, 4.0]])
    target = np.zeros((2, 2))
    mask = np.array([[True, False], [True, False]])
    val, grad = l1_and_grad(pred, target, mask)
    assert val == pytest.approx((1.0 + 4.0) / 2)
    assert_allclose(grad, [[0.5, 0.0], [0.5, 0.0]])

    val, grad = l1_and_grad(pred, target, np.zeros((2, 2), dtype=bool))
    assert val == 0.0
    assert_allclose(grad, 0.0)


def test_image_loss_combines_l1_and_ssim():
    rng = np.random.default_rng(35)
    a = rng.uniform(0, 1, size=(16, 16, 3))
    b = rng.uniform(0, 1, size=(16, 16, 3))
    val, grad, parts = image_loss_and_grad(a, b, 0.8, 0.2)
    l1 = np.abs(a - b).mean()
    s = ssim(a, b)
    assert val == pytest.approx(0.8 * l1 + 0.2 * (1 - s), abs=1e-13)
    assert parts["l1"] == pytest.approx(l1)
    assert parts["ssim"] == pytest.approx(s)

    h = 1e-6
    for idx in [(3, 4, 0), (10, 2, 1), (15, 15, 2)]:
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        vp = image_loss_and_grad(ap, b, 0.8, 0.2)[0]
        vm = image_loss_and_grad(am, b, 0.8, 0.2)[0]
        assert grad[idx] == pytest.approx((vp - vm) / (2 * h), abs=1e-6)


def test_part_cross_entropy_hand_computed():
    probs = np.array([[[0.7, 0.2, 0.1], [0.1, 0.8, 0.1]]])
    labels = np.array([[0, 1]])
    val, grad = part_cross_entropy(probs, labels)
    eps = 1e-8
    expected = -(np.log((0.7 + eps) / (1.0 + 3 * eps))
                 + np.log((0.8 + eps) / (1.0 + 3 * eps))) / 2
    assert val == pytest.approx(expected, abs=1e-12)

    # gradient against finite differences
    h = 1e-7
    for idx in np.ndindex(probs.shape):
        pp, pm = probs.copy(), probs.copy()
        pp[idx] += h
        pm[idx] -= h
        fd = (part_cross_entropy(pp, labels)[0] - part_cross_entropy(pm, labels)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, abs=1e-5)


def test_part_cross_entropy_ignores_background_and_scale():
    probs = np.array([[[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]]])
    labels = np.array([[-1, 2]])
    val, grad = part_cross_entropy(probs, labels)
    assert val == pytest.approx(-np.log((0.5 + 1e-8) / (1.0 + 3e-8)), abs=1e-12)
    assert_allclose(grad[0, 0], 0.0)  # background pixel contributes nothing

    # coverage scaling cancels through the renormalization (up to eps)
    val_scaled, _ = part_cross_entropy(probs * 0.37, labels)
    assert val_scaled == pytest.approx(val, abs=1e-6)

    assert part_cross_entropy(probs, np.full((1, 2), -1))[0] == 0.0
    with pytest.raises(ValueError):
        part_cross_entropy(probs, np.array([[0, 3]]))


# ---------------------------------------------------------------------------
# reconstruction loss
# ---------------------------------------------------------------------------


class FakeView:
    def __init__(self, camera, image, depth, labels):
        self.camera = camera
        self.image = image
        self.depth = depth
        self.labels = labels


def _simple_scene(size=24):
    cam = PinholeCamera.look_at(
        (0.4, -2.4, 0.9), (0, 0, 0),
        fx=size * 1.2, fy=size * 1.2, cx=size / 2, cy=size / 2,
        width=size, height=size,
    )
    v = np.array([
        [-0.7, 0.0, -0.7], [0.7, 0.0, -0.7], [0.0, 0.1, 0.9],
        [-0.9, 0.4, -0.5], [0.9, 0.4, -0.5], [0.0, 0.5, 1.1],
    ])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    colors = np.array([[0.9, 0.2, 0.1]] * 3 + [[0.1, 0.4, 0.8]] * 3)
    opac = np.ones(6)
    extras = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3)
    return cam, v, faces, colors, opac, extras


def test_reconstruction_loss_of_perfect_render_is_zero():
    cam, v, faces, colors, opac, extras = _simple_scene()
    cfg = raster.RenderConfig(hard=True)
    res = raster.render(cam, v, faces, colors, opac, config=cfg)
    view = FakeView(cam, res.image.copy(), res.depth.copy(),
                    np.full(res.depth.shape, -1))
    total, comps, _ = reconstruction_loss(res, view, LossWeights())
    assert comps["rgb_l1"] == 0.0  # bitwise
    assert comps["ssim"] == 1.0  # bitwise
    # the depth term renormalizes by coverage, which sits a few ulp below
    # one, so "perfect" lands within rounding of zero rather than at it
    assert comps["depth_l1"] < 1e-12
    assert total < 1e-9


def test_reconstruction_loss_perfect_render_with_part_term():
    cam, v, faces, colors, opac, extras = _simple_scene()
    cfg = raster.RenderConfig(hard=True)
    res = raster.render(cam, v, faces, colors, opac, extras=extras, config=cfg)
    labels = raster.segmentation_map(res)
    view = FakeView(cam, res.image.copy(), res.depth.copy(), labels)
    total, comps, _ = reconstruction_loss(res, view, LossWeights())
    # the part term's epsilon floor keeps a perfect prediction a hair above 0
    assert comps["part_ce"] < 1e-7
    assert total < 1e-7


def test_reconstruction_loss_gradients_match_finite_differences():
    cam, v, faces, colors, opac, extras = _simple_scene()
    cfg = raster.RenderConfig(gamma=2.0)
    rng = np.random.default_rng(36)

    target = raster.render(cam, v + rng.normal(scale=0.05, size=v.shape),
                           faces, colors, opac, extras=extras, config=cfg)
    view = FakeView(cam, target.image.copy(),
                    np.where(target.alpha > 0.5, target.depth, 0.0),
                    raster.segmentation_map(target))

    weights = LossWeights()

    def value(pos):
        res = raster.render(cam, pos, faces, colors, opac, extras=extras, config=cfg)
        return reconstruction_loss(res, view, weights)[0], res

    res = raster.render(cam, v, faces, colors, opac, extras=extras, config=cfg)
    total, _, grads = reconstruction_loss(res, view, weights)
    back = res.backward(
        grad_image=grads.get("grad_image"),
        grad_depth=grads.get("grad_depth"),
        grad_extras=grads.get("grad_extras"),
        grad_alpha=grads.get("grad_alpha"),
    )

    h = 1e-5
    ok = total_checked = 0
    for vi in range(6):
        for k in range(3):
            vp, vm = v.copy(), v.copy()
            vp[vi, k] += h
            vm[vi, k] -= h
            fd = (value(vp)[0] - value(vm)[0]) / (2 * h)
            analytic = back["positions"][vi, k]
            scale = max(abs(fd), abs(analytic), 1e-6)
            total_checked += 1
            if abs(fd - analytic) / scale < 1e-2:
                ok += 1
    assert ok / total_checked >= 0.9


def test_reconstruction_depth_term_skips_invalid_pixels():
    cam, v, faces, colors, opac, _ = _simple_scene()
    res = raster.render(cam, v, faces, colors, opac,
                        config=raster.RenderConfig(hard=True))
    # a target with no valid depth anywhere: term must vanish
    view = FakeView(cam, res.image.copy(), np.zeros_like(res.depth),
                    np.full(res.depth.shape, -1))
    total, comps, grads = reconstruction_loss(res, view, LossWeights())
    assert comps["depth_l1"] == 0.0
    assert "grad_depth" not in grads


# ---------------------------------------------------------------------------
# vertex motion consistency
# ---------------------------------------------------------------------------


def make_two_part_mesh(shift=(0.0, 0.0, 0.0)):
    """Two separated quads: part 0 static, part 1 movable.

    Colors and opacities ramp smoothly across the surface so that an
    interpolated attribute actually changes when a query point moves.
    """
    quad = np.array(
        [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]
    )
    pos = np.vstack([quad, quad + [2.5, 0.0, 0.0]]) + np.asarray(shift)
    faces = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]])
    x, y = pos[:, 0] - np.asarray(shift)[0], pos[:, 1] - np.asarray(shift)[1]
    colors = np.stack(
        [0.2 + 0.12 * x, 0.3 + 0.25 * y, 0.8 - 0.09 * x], axis=1
    )
    opacities = 0.5 + 0.08 * x
    logits = np.zeros((8, 2))
    logits[4:, 1] = 10.0
    logits[:4, 0] = 10.0
    return MeshField(pos, faces, colors, opacities, logits)


def test_vertex_loss_zero_for_perfect_motion():
    src = make_two_part_mesh()
    joint = Joint(translation=[0.0, 0.3, 0.2])
    tgt = src.copy()
    tgt.positions[src.part_labels() == 1] = joint.apply(
        src.positions[src.part_labels() == 1]
    )
    matcher = VertexMatcher(tgt)
    val, grads, stats = vertex_consistency_loss(
        src, tgt, matcher, [joint], +1, LossWeights()
    )
    assert val == pytest.approx(0.0, abs=1e-24)
    assert stats["n_valid"] == 8


def test_vertex_loss_penalizes_attribute_mismatch():
    src = make_two_part_mesh()
    tgt = src.copy()
    tgt.colors = tgt.colors + 0.2
    matcher = VertexMatcher(tgt)
    val, _, _ = vertex_consistency_loss(
        src, tgt, matcher, [identity_joint()], +1, LossWeights()
    )
    # every vertex mismatches by 0.2 in three channels: mean 3 * 0.04
    assert val == pytest.approx(0.12, abs=1e-12)


def test_vertex_loss_respects_match_distance():
    src = make_two_part_mesh()
    tgt = make_two_part_mesh(shift=(0.0, 50.0, 0.0))  # far away
    matcher = VertexMatcher(tgt)
    val, grads, stats = vertex_consistency_loss(
        src, tgt, matcher, [identity_joint()], +1, LossWeights()
    )
    assert stats["n_valid"] == 0
    assert val == 0.0
    assert_allclose(grads[0]["translation"], 0.0)


def test_matcher_part_aware_restricts_face_labels():
    tgt = make_two_part_mesh()
    matcher = VertexMatcher(tgt)
    # a query labeled part 1 sitting right on part 0's quad
    q = np.array([[0.5, 0.5, 0.01]])
    aware = matcher.match(q, np.array([1]), tau=100.0, part_aware=True)
    loose = matcher.match(q, np.array([1]), tau=100.0, part_aware=False)
    assert matcher.face_labels[aware["face"][0]] == 1  # forced to its own part
    assert matcher.face_labels[loose["face"][0]] == 0  # free to take the near one
    assert aware["dist"][0] > 1.0
    assert loose["dist"][0] == pytest.approx(0.01, abs=1e-12)

    # a part with no target faces yields an invalid match
    none = matcher.match(q, np.array([7]), tau=100.0, part_aware=True)
    assert none["face"][0] == -1
    assert not none["valid"][0]


def test_vertex_loss_joint_gradients_match_finite_differences():
    src = make_two_part_mesh()
    tgt = make_two_part_mesh()
    matcher = VertexMatcher(tgt)
    joint = Joint(
        rotvec=[0.02, -0.03, 0.05], pivot=[2.9, 0.4, 0.1],
        translation=[0.04, -0.06, 0.03], joint_type=FREE,
    )
    w = LossWeights(match_distance=10.0)
    val, grads, _ = vertex_consistency_loss(src, tgt, matcher, [joint], +1, w)
    assert val > 0.0

    h = 1e-6
    for name in ("rotvec", "pivot", "translation"):
        fd = np.zeros(3)
        for k in range(3):
            jp, jm = joint.copy(), joint.copy()
            getattr(jp, name)[k] += h
            getattr(jm, name)[k] -= h
            vp = vertex_consistency_loss(src, tgt, matcher, [jp], +1, w)[0]
            vm = vertex_consistency_loss(src, tgt, matcher, [jm], +1, w)[0]
            fd[k] = (vp - vm) / (2 * h)
        assert_allclose(grads[0][name], fd, atol=1e-6, err_msg=name)


# ---------------------------------------------------------------------------
# pixel motion consistency
# ---------------------------------------------------------------------------


def _pixel_setup():
    mesh = make_two_part_mesh()
    joint = Joint(rotvec=[0.0, 0.0, 0.35], pivot=[3.0, 0.5, 0.0], joint_type=FREE)
    cam = PinholeCamera.look_at(
        (1.5, -5.0, 2.0), (1.5, 0.5, 0.0),
        fx=30.0, fy=30.0, cx=12.0, cy=12.0, width=24, height=24,
    )
    cfg = raster.RenderConfig(gamma=2.0)
    moved = mesh.copy()
    moved.positions = mesh.positions.copy()
    lab = mesh.part_labels()
    moved.positions[lab == 1] = joint.apply(mesh.positions[lab == 1])
    res = raster.render(cam, moved.positions, moved.faces, moved.base_color(),
                        moved.opacities, config=cfg)
    view = FakeView(cam, res.image.copy(), res.depth.copy(),
                    np.full((24, 24), -1))
    return mesh, joint, view, cfg


def test_pixel_loss_zero_at_true_motion():
    mesh, joint, view, cfg = _pixel_setup()
    val, grads = pixel_consistency_loss(mesh, [joint], +1, [view], cfg, LossWeights())
    assert val == pytest.approx(0.0, abs=1e-12)


def test_pixel_loss_positive_away_from_true_motion():
    mesh, joint, view, cfg = _pixel_setup()
    off = joint.copy()
    off.rotvec[2] += 0.2
    val, _ = pixel_consistency_loss(mesh, [off], +1, [view], cfg, LossWeights())
    assert val > 1e-4


def test_pixel_loss_joint_gradients_match_finite_differences():
    mesh, joint, view, cfg = _pixel_setup()
    w = LossWeights()
    probe = joint.copy()
    probe.rotvec[2] -= 0.15  # off the optimum so gradients are informative
    val, grads = pixel_consistency_loss(mesh, [probe], +1, [view], cfg, w)

    h = 1e-5
    for name in ("rotvec", "translation", "pivot"):
        fd = np.zeros(3)
        for k in range(3):
            jp, jm = probe.copy(), probe.copy()
            getattr(jp, name)[k] += h
            getattr(jm, name)[k] -= h
            vp = pixel_consistency_loss(mesh, [jp], +1, [view], cfg, w)[0]
            vm = pixel_consistency_loss(mesh, [jm], +1, [view], cfg, w)[0]
            fd[k] = (vp - vm) / (2 * h)
        assert_allclose(grads[0][name], fd, atol=2e-6, err_msg=name)


def test_pixel_loss_requires_views():
    mesh, joint, _, cfg = _pixel_setup()
    with pytest.raises(ValueError):
        pixel_consistency_loss(mesh, [joint], +1, [], cfg, LossWeights())


def test_motion_total_formula():
    w = LossWeights(vertex_motion=0.05, pixel_motion=0.02)
    assert losses.motion_total(1.0, 2.0, 3.0, 4.0, w) == pytest.approx(
        0.05 * 3.0 + 0.02 * 7.0
    )
