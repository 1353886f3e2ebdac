"""Rigid-body transforms on SE(3).

Poses are stored as a rotation matrix plus a translation vector. Twists are
6-vectors ordered [omega, nu] with the rotational part in radians first and
the translational part in meters second. All arrays are float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Switch to Taylor series below this angle to avoid 0/0 in the closed forms.
_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def unskew(m: np.ndarray) -> np.ndarray:
    """Inverse of skew for a skew-symmetric matrix."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation matrix for a rotation vector, by Rodrigues' formula."""
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + w + 0.5 * (w @ w)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * w + b * (w @ w)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix (angle in [0, pi])."""
    trace = float(np.trace(rotation))
    cos_theta = np.clip((trace - 1.0) * 0.5, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < _SMALL_ANGLE:
        return unskew(0.5 * (rotation - rotation.T))
    if np.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from the
        # dominant diagonal of R + I instead.
        s = rotation + np.eye(3)
        k = int(np.argmax(np.diag(s)))
        axis = s[:, k] / np.sqrt(max(2.0 * (1.0 + rotation[k, k]), 1e-30))
        axis = axis / np.linalg.norm(axis)
        # Fix the sign using the off-diagonal antisymmetric remainder.
        residual = unskew(0.5 * (rotation - rotation.T))
        if np.dot(axis, residual) < 0.0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * unskew(rotation - rotation.T)


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * w + (w @ w) / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * w + c * (w @ w)


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + (w @ w) / 12.0
    half = 0.5 * theta
    cot = half / np.tan(half)
    return np.eye(3) - 0.5 * w + (1.0 - cot) / theta**2 * (w @ w)


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (SVD projection)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


@dataclass(frozen=True)
class Pose:
    """Rigid transform q = rotation @ p + translation.

    The rotation must be orthonormal within 1e-9; construction rejects
    matrices that drift beyond that (use ``orthonormalize`` first).
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        defect = np.abs(rot @ rot.T - np.eye(3)).max()
        if defect > 1e-9:
            raise ValueError(f"rotation not orthonormal (defect {defect:.3e})")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        return Pose(matrix[:3, :3], matrix[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a batch (N, 3)."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return points @ self.rotation.T + self.translation

    def orthonormalized(self) -> "Pose":
        return Pose(orthonormalize(self.rotation), self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


def compose(a: Pose, b: Pose) -> Pose:
    """Composition a then-applied-after b: (a o b)(p) = a(b(p))."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def exp_map(twist: np.ndarray) -> Pose:
    """SE(3) exponential of a twist [omega, nu].

    Matches the matrix exponential of the 4x4 twist matrix: the rotation is
    Rodrigues' formula on omega and the translation is V(omega) @ nu with V
    the left Jacobian of SO(3).
    """
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    omega = twist[:3]
    nu = twist[3:]
    return Pose(so3_exp(omega), _left_jacobian(omega) @ nu)


def log_map(pose: Pose) -> np.ndarray:
    """Twist [omega, nu] with exp_map(log_map(pose)) == pose for angles < pi."""
    omega = so3_log(pose.rotation)
    nu = _left_jacobian_inv(omega) @ pose.translation
    return np.concatenate([omega, nu])


def transform_gaussian(
    pose: Pose, mean: np.ndarray, cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Push a Gaussian (mean, cov) through a rigid transform.

    Returns (R @ mean + t, R @ cov @ R^T); the output covariance is
    symmetrized. Rejects covariances whose asymmetry exceeds 1e-6 relative
    to their largest entry.
    """
    mean = np.asarray(mean, dtype=np.float64).reshape(3)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (3, 3):
        raise ValueError(f"cov must be 3x3, got {cov.shape}")
    scale = max(float(np.abs(cov).max()), 1e-300)
    asym = float(np.abs(cov - cov.T).max()) / scale
    if asym > 1e-6:
        raise ValueError(f"covariance not symmetric (relative asymmetry {asym:.3e})")
    rot = pose.rotation
    out_cov = rot @ cov @ rot.T
    out_cov = 0.5 * (out_cov + out_cov.T)
    return rot @ mean + pose.translation, out_cov
