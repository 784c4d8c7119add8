import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from partmesh import geometry as geo


def random_rotvecs(n, rng, max_angle=np.pi):
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(-max_angle, max_angle, size=n)
    return axes * angles[:, None]


class TestRotations:
    def test_rotvec_to_matrix_matches_scipy(self):
        rng = np.random.default_rng(0)
        for w in random_rotvecs(200, rng):
            R = geo.rotvec_to_matrix(w)
            R_ref = Rotation.from_rotvec(w).as_matrix()
            np.testing.assert_allclose(R, R_ref, atol=1e-13)

    def test_small_angle_branch(self):
        w = np.array([1e-10, -2e-10, 5e-11])
        R = geo.rotvec_to_matrix(w)
        R_ref = Rotation.from_rotvec(w).as_matrix()
        np.testing.assert_allclose(R, R_ref, atol=1e-15)
        assert geo.is_orthonormal(R)

    def test_matrix_rotvec_round_trip(self):
        rng = np.random.default_rng(1)
        for w in random_rotvecs(100, rng, max_angle=np.pi - 1e-3):
            back = geo.matrix_to_rotvec(geo.rotvec_to_matrix(w))
            np.testing.assert_allclose(back, w, atol=1e-9)

    def test_quat_round_trip(self):
        rng = np.random.default_rng(2)
        for w in random_rotvecs(100, rng):
            R = geo.rotvec_to_matrix(w)
            q = geo.matrix_to_quat(R)
            assert q[0] >= 0.0
            np.testing.assert_allclose(geo.quat_to_matrix(q), R, atol=1e-12)

    def test_axis_angle_identity_convention(self):
        axis, angle = geo.rotation_axis_angle(np.eye(3))
        assert angle == 0.0
        np.testing.assert_array_equal(axis, [1.0, 0.0, 0.0])

    def test_axis_angle_recovers_inputs(self):
        axis = np.array([0.0, 0.6, 0.8])
        R = geo.rotvec_to_matrix(axis * 0.9)
        got_axis, got_angle = geo.rotation_axis_angle(R)
        np.testing.assert_allclose(got_axis, axis, atol=1e-12)
        assert abs(got_angle - 0.9) < 1e-12

    def test_random_rotation_is_orthonormal(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            assert geo.is_orthonormal(geo.random_rotation(rng))


class TestRotvecJacobian:
    def test_against_finite_differences(self):
        rng = np.random.default_rng(4)
        h = 1e-6
        for w in random_rotvecs(50, rng):
            J = geo.rotvec_jacobian(w)
            for k in range(3):
                dw = np.zeros(3)
                dw[k] = h
                fd = (geo.rotvec_to_matrix(w + dw) - geo.rotvec_to_matrix(w - dw)) / (2 * h)
                np.testing.assert_allclose(J[k], fd, atol=1e-7)

    def test_zero_rotation_gives_skew_generators(self):
        J = geo.rotvec_jacobian(np.zeros(3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            np.testing.assert_allclose(J[k], geo.skew(e), atol=1e-12)


class TestCamera:
    def make_camera(self):
        return geo.PinholeCamera.look_at(
            eye=np.array([1.5, -2.0, 1.0]),
            target=np.zeros(3),
            up=np.array([0.0, 0.0, 1.0]),
            fx=80.0, fy=80.0, cx=32.0, cy=32.0, width=64, height=64,
        )

    def test_look_at_points_camera_at_target(self):
        cam = self.make_camera()
        p_cam = cam.world_to_camera(np.zeros((1, 3)))[0]
        # the target sits on the optical axis, in front of the camera
        assert p_cam[2] > 0
        np.testing.assert_allclose(p_cam[:2], 0.0, atol=1e-12)
        pix, depth, valid = cam.project_many(np.zeros((1, 3)))
        assert valid[0]
        np.testing.assert_allclose(pix[0], [32.0, 32.0], atol=1e-9)

    def test_center_inverts_translation(self):
        cam = self.make_camera()
        np.testing.assert_allclose(cam.center, [1.5, -2.0, 1.0], atol=1e-12)

    def test_project_matches_manual_pinhole(self):
        cam = self.make_camera()
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(50, 3)) * 0.3
        pix, depth, valid = cam.project_many(pts)
        pc = cam.world_to_camera(pts)
        assert np.all(valid == (pc[:, 2] > 0.0))
        sel = valid
        np.testing.assert_allclose(pix[sel, 0], 80.0 * pc[sel, 0] / pc[sel, 2] + 32.0)
        np.testing.assert_allclose(depth[sel], pc[sel, 2])

    def test_rays_hit_their_pixels(self):
        cam = self.make_camera()
        ii, jj = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
        px = jj.ravel() + 0.5
        py = ii.ravel() + 0.5
        dirs_cam = cam.ray_directions(px, py)
        # rotate to world, walk each ray 2 units, reproject onto the pixel
        dirs_world = dirs_cam @ cam.rotation
        targets = cam.center[None, :] + 2.0 * dirs_world
        pix, _, valid = cam.project_many(targets)
        assert valid.all()
        expect = np.stack([px, py], axis=1)
        np.testing.assert_allclose(pix, expect, atol=1e-9)

    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ValueError):
            geo.PinholeCamera(
                rotation=np.eye(3), translation=np.zeros(3),
                fx=-1.0, fy=80.0, cx=32.0, cy=32.0, width=64, height=64,
            )

    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(ValueError):
            geo.PinholeCamera(
                rotation=np.eye(3) *  2.0, translation=np.zeros(3),
                fx=80.0, fy=80.0, cx=32.0, cy=32.0, width=64, height=64,
            )

    def test_degenerate_up_falls_back(self):
        cam = geo.PinholeCamera.look_at(
            eye=np.array([0.0, 0.0, 3.0]),
            target=np.zeros(3),
            up=np.array([0.0, 0.0, 1.0]),  # parallel to the view direction
            fx=80.0, fy=80.0, cx=32.0, cy=32.0, width=64, height=64,
        )
        assert geo.is_orthonormal(cam.rotation)


def sample_triangle_distance(p, a, b, c, n=400):
    """Dense barycentric sampling lower bound for point-triangle distance."""
    us = np.linspace(0.0, 1.0, n)
    best = np.inf
    for u in us:
        vs = np.linspace(0.0, 1.0 - u, max(2, int((1.0 - u) * n)))
        pts = (1.0 - u - vs)[:, None] * a + u * b + vs[:, None] * c
        d = np.linalg.norm(pts - p, axis=1).min()
        best = min(best, d)
    return best


class TestClosestPointOnTriangle:
    TRI = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    def test_regions_exact(self):
        # interior projection
        p, bary, d = geo.closest_point_on_triangle(np.array([0.2, 0.2, 1.0]), self.TRI)
        np.testing.assert_allclose(p, [0.2, 0.2, 0.0], atol=1e-15)
        assert abs(d - 1.0) < 1e-15
        # vertex region behind A
        p, bary, d = geo.closest_point_on_triangle(np.array([-1.0, -1.0, 0.0]), self.TRI)
        np.testing.assert_allclose(p, self.TRI[0], atol=1e-15)
        np.testing.assert_allclose(bary, [1.0, 0.0, 0.0])
        # edge AB region
        p, bary, d = geo.closest_point_on_triangle(np.array([0.5, -1.0, 0.0]), self.TRI)
        np.testing.assert_allclose(p, [0.5, 0.0, 0.0], atol=1e-15)

    def test_matches_dense_sampling(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            tri = rng.normal(size=(3, 3))
            q = rng.normal(size=3) * 1.5
            _, _, d = geo.closest_point_on_triangle(q, tri)
            ref = sample_triangle_distance(q, tri[0], tri[1], tri[2])
            assert d <= ref + 1e-9
            assert abs(d - ref) < 5e-3

    def test_barycentric_reconstructs_point(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            tri = rng.normal(size=(3, 3))
            q = rng.normal(size=3)
            p, bary, _ = geo.closest_point_on_triangle(q, tri)
            np.testing.assert_allclose(bary.sum(), 1.0, atol=1e-12)
            np.testing.assert_allclose(bary @ tri, p, atol=1e-12)

    def test_degenerate_triangle_uses_longest_edge(self):
        tri = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        p, bary, d = geo.closest_point_on_triangle(np.array([1.0, 1.0, 0.0]), tri)
        np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-12)
        assert abs(d - 1.0) < 1e-12

    def test_segment_helper(self):
        p, t = geo.closest_point_on_segment(
            np.array([0.5, 2.0, 0.0]), np.zeros(3), np.array([1.0, 0.0, 0.0])
        )
        np.testing.assert_allclose(p, [0.5, 0.0, 0.0])
        assert abs(t - 0.5) < 1e-12
