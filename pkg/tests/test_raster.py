"""Rasterizer forward oracle (loop reference) and analytic-vs-FD gradients."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from partmesh import raster
from partmesh.geometry import PinholeCamera
from partmesh.raster import RenderConfig, render, segmentation_map


def make_camera(size=24, dist=2.5, eye=None, focal=None):
    eye = (0.6, -dist, 1.1) if eye is None else eye
    f = focal if focal is not None else size * 1.3
    return PinholeCamera.look_at(
        eye, (0.0, 0.0, 0.0),
        fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size,
    )


def random_scene(rng, n_faces=10, n_extra=0, opacity_hi=0.95):
    """Random triangle soup near the origin with per-vertex attributes."""
    v = rng.uniform(-0.55, 0.55, size=(3 * n_faces, 3))
    faces = np.arange(3 * n_faces).reshape(n_faces, 3)
    colors = rng.uniform(0.1, 0.9, size=(3 * n_faces, 3))
    opac = rng.uniform(0.3, opacity_hi, size=3 * n_faces)
    extras = rng.uniform(0.0, 1.0, size=(3 * n_faces, n_extra)) if n_extra else None
    return v, faces, colors, opac, extras


# ---------------------------------------------------------------------------
# independent per-pixel reference renderer
# ---------------------------------------------------------------------------


def cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


def reference_render(camera, positions, faces, colors, opacities, extras=None,
                     config=None):
    """Slow per-pixel compositing loop used as the forward oracle."""
    cfg = config or RenderConfig()
    H, W = camera.height, camera.width
    bg = np.asarray(cfg.background, dtype=np.float64)
    cam_pts = camera.world_to_camera(positions)
    z = cam_pts[:, 2]
    zs = np.where(z > camera.near, z, 1.0)
    sx = camera.fx * cam_pts[:, 0] / zs + camera.cx
    sy = camera.fy * cam_pts[:, 1] / zs + camera.cy

    n_extra = 0 if extras is None else extras.shape[1]
    ordered = []
    for f in range(faces.shape[0]):
        i, j, k = faces[f]
        if not (z[i] > camera.near and z[j] > camera.near and z[k] > camera.near):
            continue
        a = np.linalg.norm(cam_pts[j] - cam_pts[k])
        b = np.linalg.norm(cam_pts[k] - cam_pts[i])
        c = np.linalg.norm(cam_pts[i] - cam_pts[j])
        ordered.append(((a * z[i] + b * z[j] + c * z[k]) / (a + b + c), f))
    ordered.sort()

    image = np.tile(bg, (H, W, 1))
    depth = np.zeros((H, W))
    cover = np.zeros((H, W))
    extra_img = np.zeros((H, W, n_extra)) if n_extra else None

    for py in range(H):
        for px in range(W):
            p = np.array([px + 0.5, py + 0.5])
            transmit = 1.0
            acc_c = np.zeros(3)
            acc_d = 0.0
            acc_e = np.zeros(n_extra) if n_extra else None
            for _, f in ordered:
                vi = faces[f]
                v = np.stack([np.array([sx[t], sy[t]]) for t in vi])
                st = 0.5 * cross2(v[1] - v[0], v[2] - v[0])
                if abs(st) <= 1e-14:
                    continue
                orient = np.sign(st)
                elen = [
                    np.linalg.norm(v[1] - v[0]),
                    np.linalg.norm(v[2] - v[1]),
                    np.linalg.norm(v[0] - v[2]),
                ]
                dists = []
                for e in range(3):
                    a2, b2 = v[e], v[(e + 1) % 3]
                    cr = (b2[0] - a2[0]) * (p[1] - a2[1]) - (b2[1] - a2[1]) * (
                        p[0] - a2[0]
                    )
                    dists.append(orient * cr / elen[e])
                psi = min(dists)
                if psi <= 0.0:
                    continue
                s0 = 0.5 * cross2(v[1] - p, v[2] - p)
                s1 = 0.5 * cross2(p - v[0], v[2] - v[0])
                s2 = 0.5 * cross2(v[1] - v[0], p - v[0])
                bs = np.array([s0, s1, s2]) / st
                zc = z[vi]
                wpc = bs / zc
                beta = wpc / wpc.sum()
                z_pix = 1.0 / wpc.sum()
                if cfg.hard:
                    phi = 1.0
                else:
                    inradius = 2.0 * abs(st) / sum(elen)
                    phi = (psi / inradius) ** cfg.gamma
                alpha = float(beta @ opacities[vi]) * phi
                if not cfg.hard:
                    alpha = min(alpha, cfg.alpha_clip)
                w = alpha * transmit
                acc_c += w * (beta @ colors[vi])
                acc_d += w * z_pix
                if n_extra:
                    acc_e += w * (beta @ extras[vi])
                transmit *= 1.0 - alpha
            image[py, px] = acc_c + bg * transmit
            depth[py, px] = acc_d
            cover[py, px] = 1.0 - transmit
            if n_extra:
                extra_img[py, px] = acc_e
    return image, depth, cover, extra_img


@pytest.mark.parametrize("hard", [False, True])
def test_render_matches_loop_reference(hard):
    rng = np.random.default_rng(20)
    cam = make_camera(size=20)
    cfg = RenderConfig(gamma=2.0, background=(0.1, 0.2, 0.3), hard=hard)
    v, faces, colors, opac, extras = random_scene(rng, n_faces=8, n_extra=2)
    res = render(cam, v, faces, colors, opac, extras=extras, config=cfg)
    img, dep, cov, ext = reference_render(
        cam, v, faces, colors, opac, extras=extras, config=cfg
    )
    assert_allclose(res.image, img, atol=1e-12)
    assert_allclose(res.depth, dep, atol=1e-12)
    assert_allclose(res.alpha, cov, atol=1e-12)
    assert_allclose(res.extras, ext, atol=1e-12)


def test_render_matches_reference_with_overlap_and_gamma_one():
    rng = np.random.default_rng(21)
    cam = make_camera(size=16)
    cfg = RenderConfig(gamma=1.0, background=(0.0, 0.0, 0.0))
    # two stacked quads guarantee heavy fragment overlap
    quad = np.array(
        [[-0.5, -0.5, 0.0], [0.5, -0.5, 0.0], [0.5, 0.5, 0.0], [-0.5, 0.5, 0.0]]
    )
    v = np.vstack([quad, quad + [0.07, 0.03, 0.4]])
    faces = np.array([[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]])
    colors = rng.uniform(0.2, 0.8, size=(8, 3))
    opac = rng.uniform(0.4, 0.9, size=8)
    res = render(cam, v, faces, colors, opac, config=cfg)
    img, dep, cov, _ = reference_render(cam, v, faces, colors, opac, config=cfg)
    assert_allclose(res.image, img, atol=1e-12)
    assert_allclose(res.depth, dep, atol=1e-12)
    assert_allclose(res.alpha, cov, atol=1e-12)


# ---------------------------------------------------------------------------
# exactness properties of hard renders
# ---------------------------------------------------------------------------


def test_hard_depth_is_ray_plane_intersection():
    cam = make_camera(size=32, focal=40.0)
    v = np.array([[-0.8, 0.1, -0.6], [0.9, 0.2, -0.5], [0.0, -0.1, 1.0]])
    faces = np.array([[0, 1, 2]])
    colors = np.full((3, 3), 0.5)
    opac = np.ones(3)
    res = render(cam, v, faces, colors, opac, config=RenderConfig(hard=True))

    cam_v = cam.world_to_camera(v)
    normal = np.cross(cam_v[1] - cam_v[0], cam_v[2] - cam_v[0])
    offset = normal @ cam_v[0]
    hit = np.nonzero(res.alpha > 0.5)
    assert hit[0].size > 20
    for py, px in zip(*hit):
        ray = np.array(
            [(px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy, 1.0]
        )
        z_expected = offset / (normal @ ray)
        assert abs(res.depth[py, px] - z_expected) < 1e-10


def test_hard_render_is_binary_coverage():
    cam = make_camera(size=24)
    v = np.array([[-0.6, 0.0, -0.6], [0.6, 0.0, -0.6], [0.0, 0.0, 0.8]])
    res = render(
        cam, v, np.array([[0, 1, 2]]), np.full((3, 3), 0.7), np.ones(3),
        config=RenderConfig(hard=True),
    )
    vals = np.unique(res.alpha)
    assert set(np.round(vals, 15)).issubset({0.0, 1.0})
    covered = res.alpha == 1.0
    assert covered.any()
    assert_allclose(res.image[covered], 0.7, atol=1e-12)


def test_interpolation_is_perspective_correct():
    # a triangle with very unequal corner depths: screen-linear interpolation
    # would get the midpoint color wrong, perspective-correct does not
    cam = PinholeCamera.look_at(
        (0.0, -3.0, 0.0), (0.0, 0.0, 0.0),
        fx=40.0, fy=40.0, cx=16.0, cy=16.0, width=32, height=32,
    )
    v = np.array([[-0.5, 0.0, -0.4], [0.5, 3.0, -0.4], [0.0, 1.0, 1.2]])
    faces = np.array([[0, 1, 2]])
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    opac = np.ones(3)
    res = render(cam, v, faces, colors, opac, config=RenderConfig(hard=True))

    covered = np.nonzero(res.alpha > 0.5)
    cam_v = cam.world_to_camera(v)
    normal = np.cross(cam_v[1] - cam_v[0], cam_v[2] - cam_v[0])
    offset = normal @ cam_v[0]
    checked = 0
    for py, px in zip(*covered):
        ray = np.array(
            [(px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy, 1.0]
        )
        hit_pt = ray * (offset / (normal @ ray))
        # world barycentrics of the 3D intersection point are the exact
        # perspective-correct weights
        e1, e2 = cam_v[1] - cam_v[0], cam_v[2] - cam_v[0]
        rel = hit_pt - cam_v[0]
        g = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
        b12 = np.linalg.solve(g, np.array([rel @ e1, rel @ e2]))
        bary = np.array([1.0 - b12.sum(), b12[0], b12[1]])
        if np.any(bary < 0.02):
            continue  # skip boundary pixels
        assert_allclose(res.image[py, px], bary @ colors, atol=1e-9)
        checked += 1
    assert checked > 10


# ---------------------------------------------------------------------------
# culling, empty scenes, bookkeeping
# ---------------------------------------------------------------------------


def test_empty_and_culled_scenes_render_background():
    cam = make_camera(size=8)
    bg = (0.25, 0.5, 0.75)
    cfg = RenderConfig(background=bg)

    res = render(cam, np.zeros((0, 3)), np.zeros((0, 3), dtype=int),
                 np.zeros((0, 3)), np.zeros(0), config=cfg)
    assert_allclose(res.image, np.tile(bg, (8, 8, 1)))
    assert_allclose(res.depth, 0.0)
    assert_allclose(res.alpha, 0.0)

    # behind the camera
    v = np.array([[0.0, -9.0, 0.0], [1.0, -9.0, 0.0], [0.0, -9.0, 1.0]])
    res = render(cam, v, np.array([[0, 1, 2]]), np.full((3, 3), 0.5), np.ones(3),
                 config=cfg)
    assert_allclose(res.alpha, 0.0)

    # degenerate (zero-area) triangle
    v = np.array([[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0]])
    res = render(cam, v, np.array([[0, 1, 2]]), np.full((3, 3), 0.5), np.ones(3),
                 config=cfg)
    assert_allclose(res.alpha, 0.0)


def test_render_is_deterministic():
    rng = np.random.default_rng(22)
    cam = make_camera()
    v, faces, colors, opac, _ = random_scene(rng)
    a = render(cam, v, faces, colors, opac)
    b = render(cam, v, faces, colors, opac)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.alpha, b.alpha)


def test_hard_render_backward_raises():
    cam = make_camera(size=8)
    v = np.array([[-0.4, 0.0, -0.4], [0.4, 0.0, -0.4], [0.0, 0.0, 0.6]])
    res = render(cam, v, np.array([[0, 1, 2]]), np.full((3, 3), 0.5), np.ones(3),
                 config=RenderConfig(hard=True))
    with pytest.raises(RuntimeError):
        res.backward(grad_image=np.zeros((8, 8, 3)))


def test_segmentation_map_from_extras():
    cam = make_camera(size=16)
    v = np.array([[-0.7, 0.0, -0.7], [0.7, 0.0, -0.7], [0.0, 0.0, 0.9]])
    onehot = np.tile([0.0, 1.0, 0.0], (3, 1))  # every vertex in part 1
    res = render(cam, v, np.array([[0, 1, 2]]), np.full((3, 3), 0.5), np.ones(3),
                 extras=onehot, config=RenderConfig(hard=True))
    labels = segmentation_map(res)
    assert set(np.unique(labels)) <= {-1, 1}
    assert (labels == 1).any()
    assert np.all((labels == 1) == (res.alpha >= 0.5))

    res_plain = render(cam, v, np.array([[0, 1, 2]]), np.full((3, 3), 0.5),
                       np.ones(3), config=RenderConfig(hard=True))
    with pytest.raises(ValueError):
        segmentation_map(res_plain)


# ---------------------------------------------------------------------------
# analytic gradients vs central finite differences
# ---------------------------------------------------------------------------


def _scene_loss(cam, v, faces, colors, opac, extras, cfg, weights):
    res = render(cam, v, faces, colors, opac, extras=extras, config=cfg)
    loss = float(np.sum(weights["image"] * res.image))
    loss += float(np.sum(weights["depth"] * res.depth))
    loss += float(np.sum(weights["alpha"] * res.alpha))
    if extras is not None:
        loss += float(np.sum(weights["extras"] * res.extras))
    return loss, res


def _fd_check(rng, n_extra):
    cam = make_camera(size=24)
    cfg = RenderConfig(gamma=2.0, background=(0.3, 0.1, 0.2))
    v, faces, colors, opac, extras = random_scene(rng, n_faces=10, n_extra=n_extra)
    weights = {
        "image": rng.normal(size=(24, 24, 3)),
        "depth": rng.normal(size=(24, 24)),
        "alpha": rng.normal(size=(24, 24)),
        "extras": rng.normal(size=(24, 24, n_extra)) if n_extra else None,
    }
    _, res = _scene_loss(cam, v, faces, colors, opac, extras, cfg, weights)
    grads = res.backward(
        grad_image=weights["image"],
        grad_depth=weights["depth"],
        grad_extras=weights["extras"],
        grad_alpha=weights["alpha"],
    )

    h = 1e-4
    checks = []  # (analytic, finite-difference) pairs

    def fd(param, index, setter):
        plus = setter(param, index, +h)
        lp, _ = _scene_loss(cam, *plus, cfg=cfg, weights=weights)
        minus = setter(param, index, -h)
        lm, _ = _scene_loss(cam, *minus, cfg=cfg, weights=weights)
        return (lp - lm) / (2 * h)

    def set_pos(_, idx, d):
        v2 = v.copy()
        v2[idx] += d
        return v2, faces, colors, opac, extras

    def set_col(_, idx, d):
        c2 = colors.copy()
        c2[idx] += d
        return v, faces, c2, opac, extras

    def set_opa(_, idx, d):
        o2 = opac.copy()
        o2[idx] += d
        return v, faces, colors, o2, extras

    def set_ext(_, idx, d):
        e2 = extras.copy()
        e2[idx] += d
        return v, faces, colors, opac, e2

    nv = v.shape[0]
    for vi in rng.choice(nv, size=8, replace=False):
        for k in range(3):
            checks.append((grads["positions"][vi, k], fd(None, (vi, k), set_pos)))
    for vi in rng.choice(nv, size=6, replace=False):
        for k in range(3):
            checks.append((grads["colors"][vi, k], fd(None, (vi, k), set_col)))
    for vi in rng.choice(nv, size=10, replace=False):
        checks.append((grads["opacities"][vi], fd(None, vi, set_opa)))
    if n_extra:
        for vi in rng.choice(nv, size=6, replace=False):
            for k in range(n_extra):
                checks.append((grads["extras"][vi, k], fd(None, (vi, k), set_ext)))

    ok = 0
    for analytic, numeric in checks:
        scale = max(abs(analytic), abs(numeric), 1e-6)
        if abs(analytic - numeric) / scale < 1e-2:
            ok += 1
    return ok, len(checks)


def test_gradients_match_finite_differences():
    ok, n = _fd_check(np.random.default_rng(23), n_extra=0)
    assert ok / n >= 0.95, f"{ok}/{n} gradient checks within 1% of FD"


def test_gradients_match_finite_differences_with_extras():
    ok, n = _fd_check(np.random.default_rng(24), n_extra=3)
    assert ok / n >= 0.95, f"{ok}/{n} gradient checks within 1% of FD"


def test_gradients_finite_at_saturated_opacity():
    cam = make_camera(size=16)
    v = np.array([[-0.7, 0.0, -0.7], [0.7, 0.0, -0.7], [0.0, 0.0, 0.9]])
    res = render(cam, v, np.array([[0, 1, 2]]), np.full((3, 3), 0.5), np.ones(3),
                 config=RenderConfig(gamma=0.001))  # phi ~ 1: alpha saturates
    assert res.alpha.max() > 0.99
    grads = res.backward(grad_image=np.ones((16, 16, 3)),
                         grad_alpha=np.ones((16, 16)))
    for key in ("positions", "colors", "opacities"):
        assert np.all(np.isfinite(grads[key])), key


def test_backward_with_no_gradients_returns_zeros():
    cam = make_camera(size=8)
    v = np.array([[-0.4, 0.0, -0.4], [0.4, 0.0, -0.4], [0.0, 0.0, 0.6]])
    res = render(cam, v, np.array([[0, 1, 2]]), np.full((3, 3), 0.5),
                 np.full(3, 0.6))
    grads = res.backward()
    assert_allclose(grads["positions"], 0.0)
    assert_allclose(grads["colors"], 0.0)
    assert_allclose(grads["opacities"], 0.0)


def test_empty_scene_backward_returns_zero_shapes():
    cam = make_camera(size=8)
    res = render(cam, np.zeros((5, 3)), np.zeros((0, 3), dtype=int),
                 np.zeros((5, 3)), np.zeros(5))
    grads = res.backward(grad_image=np.ones((8, 8, 3)))
    assert grads["positions"].shape == (5, 3)
    assert_allclose(grads["positions"], 0.0)
