"""Rigid per-part joints and mesh transport between the two object states.

Each movable part k in {1..K} owns one joint with a rotation (axis-angle
vector), a pivot point, and a translation. The forward map sends a point
from the first observed state to the second:

    y = R (x - P) + P + T  =  R x + b,   b = P + T - R P

Part 0 is the static base and always maps through the identity. The
backward map is the exact closed-form inverse, y = R^T (x - b).

Joint types: "free" keeps all nine parameters live, "revolute" pins the
translation to zero, "prismatic" pins the rotation and pivot to zero.
Pinned components are both zeroed in place and masked out of gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import rotation_axis_angle, rotvec_jacobian, rotvec_to_matrix

FREE = "free"
REVOLUTE = "revolute"
PRISMATIC = "prismatic"
JOINT_TYPES = (FREE, REVOLUTE, PRISMATIC)


@dataclass
class Joint:
    """One rigid joint: rotation about a pivot followed by a translation."""

    rotvec: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pivot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    joint_type: str = FREE

    def __post_init__(self):
        self.rotvec = np.array(self.rotvec, dtype=np.float64).reshape(3)
        self.pivot = np.array(self.pivot, dtype=np.float64).reshape(3)
        self.translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if self.joint_type not in JOINT_TYPES:
            raise ValueError(f"unknown joint type {self.joint_type!r}")

    # ------------------------------------------------------------------
    # constraints
    # ------------------------------------------------------------------

    def canonicalize(self) -> "Joint":
        """Zero the parameters that the joint type pins. In place."""
        if self.joint_type == REVOLUTE:
            self.translation[:] = 0.0
        elif self.joint_type == PRISMATIC:
            self.rotvec[:] = 0.0
            self.pivot[:] = 0.0
        return self

    def gradient_mask(self) -> dict:
        """Per-parameter multipliers: 1 keeps a gradient, 0 freezes it."""
        live = {
            "rotvec": np.ones(3),
            "pivot": np.ones(3),
            "translation": np.ones(3),
        }
        if self.joint_type == REVOLUTE:
            live["translation"] = np.zeros(3)
        elif self.joint_type == PRISMATIC:
            live["rotvec"] = np.zeros(3)
            live["pivot"] = np.zeros(3)
        return live

    # ------------------------------------------------------------------
    # transforms
    # ------------------------------------------------------------------

    def rotation(self) -> np.ndarray:
        return rotvec_to_matrix(self.rotvec)

    def offset(self) -> np.ndarray:
        """The b of y = R x + b."""
        R = self.rotation()
        return self.pivot + self.translation - R @ self.pivot

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 forward transform."""
        G = np.eye(4)
        G[:3, :3] = self.rotation()
        G[:3, 3] = self.offset()
        return G

    def inverse_matrix(self) -> np.ndarray:
        """Closed-form inverse of matrix(): [R^T, -R^T b]."""
        R = self.rotation()
        b = self.offset()
        G = np.eye(4)
        G[:3, :3] = R.T
        G[:3, 3] = -R.T @ b
        return G

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        R = self.rotation()
        return pts @ R.T + self.offset()

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        R = self.rotation()
        return (pts - self.offset()) @ R

    # ------------------------------------------------------------------
    # descriptors
    # ------------------------------------------------------------------

    def axis(self) -> np.ndarray:
        """Unit motion axis: rotation axis, or translation direction."""
        if self.joint_type == PRISMATIC:
            n = np.linalg.norm(self.translation)
            if n < 1e-12:
                return np.array([1.0, 0.0, 0.0])
            return self.translation / n
        ax, _ = rotation_axis_angle(self.rotation())
        return ax

    def angle(self) -> float:
        """Rotation magnitude in radians."""
        return float(np.linalg.norm(self.rotvec))

    def copy(self) -> "Joint":
        return Joint(
            rotvec=self.rotvec.copy(),
            pivot=self.pivot.copy(),
            translation=self.translation.copy(),
            joint_type=self.joint_type,
        )


def identity_joint() -> Joint:
    return Joint()


# ---------------------------------------------------------------------------
# whole-mesh transport
# ---------------------------------------------------------------------------

def transport_points(
    points: np.ndarray,
    labels: np.ndarray,
    joints: list,
    direction: int = +1,
) -> np.ndarray:
    """Move labeled points between states with per-part rigid maps.

    Parameters
    ----------
    points : (N, 3) positions in the source state
    labels : (N,) hard part labels in {0..K}; 0 is the static base
    joints : list of K Joint objects for parts 1..K
    direction : +1 maps first state to second, -1 the reverse

    Label 0 and labels without a joint pass through unchanged.
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    out = points.copy()
    for k, joint in enumerate(joints, start=1):
        m = labels == k
        if not np.any(m):
            continue
        if direction >= 0:
            out[m] = joint.apply(points[m])
        else:
            out[m] = joint.apply_inverse(points[m])
    return out


def transport_gradients(
    points: np.ndarray,
    grad_out: np.ndarray,
    joint: Joint,
    direction: int = +1,
) -> dict:
    """Backpropagate dL/dy of transported points to one joint's parameters.

    Forward (direction >= 0):  y = R (x - P) + P + T
        dy/dT = I, dy/dP = I - R, dy/dw_k = J_k (x - P)
    Backward (direction < 0):  y = R^T (x - P - T) + P
        dy/dT = -R^T, dy/dP = I - R^T, dy/dw_k = J_k^T (x - P - T)

    Returns dict with "rotvec", "pivot", "translation" gradient vectors,
    already multiplied by the joint's type mask. Also returns "points":
    dL/dx for chaining into vertex positions.
    """
    points = np.asarray(points, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    R = joint.rotation()
    J = rotvec_jacobian(joint.rotvec)
    mask = joint.gradient_mask()

    if direction >= 0:
        lever = points - joint.pivot
        g_T = grad_out.sum(axis=0)
        g_P = g_T - (grad_out @ R).sum(axis=0)
        g_w = np.array([np.sum((lever @ J[k].T) * grad_out) for k in range(3)])
        g_x = grad_out @ R
    else:
        lever = points - joint.pivot - joint.translation
        g_T = -(grad_out @ R.T).sum(axis=0)
        g_P = grad_out.sum(axis=0) + g_T
        g_w = np.array([np.sum((lever @ J[k]) * grad_out) for k in range(3)])
        g_x = grad_out @ R.T

    return {
        "rotvec": g_w * mask["rotvec"],
        "pivot": g_P * mask["pivot"],
        "translation": g_T * mask["translation"],
        "points": g_x,
    }


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def pca_seed_joint(points_a: np.ndarray, points_b: np.ndarray, eps: float = 1e-4) -> Joint:
    """Initial free joint for a part observed as two point clouds.

    Pivot is the first cloud's centroid, translation the centroid shift,
    and the rotation a tiny twist (eps radians) about the first cloud's
    principal axis so the rotation direction starts out informed but the
    initial map is still near identity.
    """
    points_a = np.asarray(points_a, dtype=np.float64)
    points_b = np.asarray(points_b, dtype=np.float64)
    ca = points_a.mean(axis=0)
    cb = points_b.mean(axis=0)
    centered = points_a - ca
    if points_a.shape[0] >= 3:
        cov = centered.T @ centered / points_a.shape[0]
        evals, evecs = np.linalg.eigh(cov)
        axis = evecs[:, np.argmax(evals)]
        # eigenvector sign is arbitrary; pin the dominant component positive
        if axis[np.argmax(np.abs(axis))] < 0.0:
            axis = -axis
    else:
        axis = np.array([0.0, 0.0, 1.0])
    return Joint(rotvec=eps * axis, pivot=ca, translation=cb - ca, joint_type=FREE)
