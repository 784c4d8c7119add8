"""Geometric primitives: rotations, pinhole cameras, point/triangle queries.

Conventions used throughout the package:

- vectors are float64 numpy arrays of shape (3,), stacked as (N, 3)
- rotation matrices are (3, 3) row-major, acting on column vectors (R @ x)
- quaternions are (4,) arrays in (w, x, y, z) order with unit norm
- rotation vectors ("rotvec") are axis * angle, angle in radians
- cameras map world to camera via x_cam = R @ x_world + t, with x right,
  y down, z forward (OpenCV-style); pixel centers sit at (i + 0.5, j + 0.5)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UNIT_NORM_TOL = 1e-9


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("cannot normalize zero quaternion")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0.0:
        q = -q
    return quat_normalize(q)


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues formula for rotvec = axis * angle."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        K = skew(w)
        return np.eye(3) + K + 0.5 * (K @ K)
    K = skew(w / theta)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotvec_to_quat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, 0.5 * w[0], 0.5 * w[1], 0.5 * w[2]]))
    axis = w / theta
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    vn = np.sqrt(x * x + y * y + z * z)
    if vn < 1e-12:
        return 2.0 * np.array([x, y, z])
    angle = 2.0 * np.arctan2(vn, w)
    if angle > np.pi:
        angle -= 2.0 * np.pi
    return (angle / vn) * np.array([x, y, z])


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    return quat_to_rotvec(matrix_to_quat(R))


def rotation_axis_angle(R: np.ndarray) -> tuple[np.ndarray, float]:
    """Rotation axis (unit) and angle in radians, angle >= 0.

    Identity rotations return axis (1, 0, 0) with angle 0.
    """
    w = matrix_to_rotvec(R)
    angle = float(np.linalg.norm(w))
    if angle < 1e-12:
        return np.array([1.0, 0.0, 0.0]), 0.0
    return w / angle, angle


def rotvec_jacobian(w: np.ndarray) -> np.ndarray:
    """Derivative of R(w) with respect to w.

    Returns J with shape (3, 3, 3) where J[k] = dR/dw_k, using the
    closed form d R/d w_k = ((w_k [w]x + [w x (I - R) e_k]x) / |w|^2) R.
    """
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    R = rotvec_to_matrix(w)
    J = np.empty((3, 3, 3))
    if theta2 < 1e-16:
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            J[k] = skew(e)
        return J
    Wx = skew(w)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        v = np.cross(w, (np.eye(3) - R) @ e)
        J[k] = ((w[k] * Wx + skew(v)) / theta2) @ R
    return J


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_matrix(quat_normalize(q))


def is_orthonormal(R: np.ndarray, tol: float = UNIT_NORM_TOL) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        return False
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    return bool(err < tol and np.linalg.det(R) > 0.0)


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PinholeCamera:
    """World-to-camera rigid pose plus pinhole intrinsics.

    rotation/translation map world points into the camera frame; fx, fy,
    cx, cy are in pixels; near/far bound usable depth in scene units.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 1e-3
    far: float = 1e3

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if not is_orthonormal(self.rotation):
            raise ValueError("camera rotation must be orthonormal")
        self.rotation.setflags(write=False)
        self.translation.setflags(write=False)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics) -> "PinholeCamera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
            rn = np.linalg.norm(right)
        right = right / rn
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(rotation=R, translation=-R @ eye, **intrinsics)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project_many(self, points: np.ndarray):
        """Project (N, 3) world points; returns (pixels, depths, valid)."""
        cam = self.world_to_camera(np.atleast_2d(points))
        z = cam[:, 2]
        valid = z > 0.0
        zs = np.where(valid, z, 1.0)
        px = self.fx * cam[:, 0] / zs + self.cx
        py = self.fy * cam[:, 1] / zs + self.cy
        return np.stack([px, py], axis=1), z, valid

    def ray_directions(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Camera-frame ray directions with unit z for pixel coordinates."""
        return np.stack(
            [(px - self.cx) / self.fx, (py - self.cy) / self.fy, np.ones_like(px)], axis=-1
        )

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


def project_point(cam: PinholeCamera, x_world) -> tuple[np.ndarray, float, bool]:
    """Project one world point: (pixel, camera-frame depth, valid).

    Depth is the camera-frame z; points with depth <= 0 are flagged invalid
    and their pixel is meaningless.
    """
    pix, z, valid = cam.project_many(np.asarray(x_world, dtype=np.float64)[None, :])
    return pix[0], float(z[0]), bool(valid[0])


# ---------------------------------------------------------------------------
# point/triangle queries
# ---------------------------------------------------------------------------

def closest_point_on_segment(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-300:
        return a.copy(), 0.0
    t = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return a + t * ab, t


def closest_point_on_triangle(p, tri):
    """Closest point on a (possibly degenerate) triangle.

    Parameters
    ----------
    p : (3,) query point
    tri : (3, 3) vertices, rows A, B, C

    Returns
    -------
    (point, bary, dist) : the closest point on the closed triangle, its
    barycentric weights (nonnegative, summing to 1), and ||p - point||.
    Degenerate (collinear) triangles fall back to the longest edge.
    """
    p = np.asarray(p, dtype=np.float64)
    tri = np.asarray(tri, dtype=np.float64)
    pt, bary, d2 = _closest_point_on_triangles(p[None, :], tri[None, :, :])
    return pt[0], bary[0], float(np.sqrt(d2[0]))


def _closest_point_on_triangles(p: np.ndarray, tri: np.ndarray):
    """Vectorized closest point for (M, 3) points against (M, 3, 3) triangles.

    Returns (points (M,3), barycentrics (M,3), squared distances (M,)).
    Follows the standard Voronoi-region case analysis; degenerate triangles
    are redirected to their longest edge.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    m = p.shape[0]
    bary = np.zeros((m, 3))
    done = np.zeros(m, dtype=bool)

    def assign(mask, b0, b1, b2):
        mask = mask & ~done
        bary[mask, 0] = b0[mask] if isinstance(b0, np.ndarray) else b0
        bary[mask, 1] = b1[mask] if isinstance(b1, np.ndarray) else b1
        bary[mask, 2] = b2[mask] if isinstance(b2, np.ndarray) else b2
        done[mask] = True

    # degenerate triangles: collapse onto the longest edge
    cross = np.cross(ab, ac)
    area2 = np.einsum("ij,ij->i", cross, cross)
    scale = np.maximum.reduce(
        [np.einsum("ij,ij->i", ab, ab), np.einsum("ij,ij->i", ac, ac),
         np.einsum("ij,ij->i", c - b, c - b)]
    )
    degen = area2 <= 1e-24 * np.maximum(scale * scale, 1e-300)
    if np.any(degen):
        idx = np.nonzero(degen)[0]
        edges = np.stack([ab[idx], ac[idx], (c - b)[idx]])
        lengths = np.einsum("kij,kij->ki", edges, edges)
        which = np.argmax(lengths, axis=0)
        for ii, w in zip(idx, which):
            e0, e1 = ((a[ii], b[ii]), (a[ii], c[ii]), (b[ii], c[ii]))[w]
            pt, t = closest_point_on_segment(p[ii], e0, e1)
            wts = ((1.0 - t, t, 0.0), (1.0 - t, 0.0, t), (0.0, 1.0 - t, t))[w]
            bary[ii] = wts
            done[ii] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        assign((d1 <= 0.0) & (d2 <= 0.0), 1.0, 0.0, 0.0)
        assign((d3 >= 0.0) & (d4 <= d3), 0.0, 1.0, 0.0)
        v_ab = np.where(d1 - d3 != 0.0, d1 / (d1 - d3), 0.0)
        assign((vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0), 1.0 - v_ab, v_ab, 0.0)
        assign((d6 >= 0.0) & (d5 <= d6), 0.0, 0.0, 1.0)
        w_ac = np.where(d2 - d6 != 0.0, d2 / (d2 - d6), 0.0)
        assign((vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0), 1.0 - w_ac, 0.0, w_ac)
        w_bc = np.where((d4 - d3) + (d5 - d6) != 0.0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)
        assign((va <= 0.0) & (d4 - d3 >= 0.0) & (d5 - d6 >= 0.0), 0.0, 1.0 - w_bc, w_bc)
        denom = va + vb + vc
        v_in = np.where(denom != 0.0, vb / denom, 0.0)
        w_in = np.where(denom != 0.0, vc / denom, 0.0)
        assign(~done, 1.0 - v_in - w_in, v_in, w_in)

    point = bary[:, 0:1] * a + bary[:, 1:2] * b + bary[:, 2:3] * c
    diff = p - point
    return point, bary, np.einsum("ij,ij->i", diff, diff)
