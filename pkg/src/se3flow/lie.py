"""SO(3)/SE(3) group operations in float64.

Rotations are stored as 3x3 matrices; axis-angle 3-vectors live in the
tangent space. All functions are pure and thread-safe except where a
RandomStream (numpy Generator) is consumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError, NumericalError

ROTATION_TOL = 1e-6
_SMALL_ANGLE = 1e-8
_NEAR_PI = 1e-2


@dataclass(frozen=True)
class Rotation:
    """A rotation matrix. `m` is (3,3) float64 with m^T m = I, det m = 1."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        object.__setattr__(self, "m", m)

    @property
    def T(self) -> "Rotation":
        return Rotation(self.m.T.copy())


@dataclass(frozen=True)
class Pose:
    """An SE(3) element: rotation `r` plus translation `p` (3-vector)."""

    r: Rotation
    p: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.float64))


def identity_rotation() -> Rotation:
    return Rotation(np.eye(3))


def identity_pose() -> Pose:
    return Pose(identity_rotation(), np.zeros(3))


def check_rotation(m: np.ndarray, tol: float = ROTATION_TOL) -> None:
    """Validate orthonormality and det=1; raises InvalidArgumentError."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidArgumentError("rotation must be a finite 3x3 matrix")
    if np.max(np.abs(m.T @ m - np.eye(3))) > tol:
        raise InvalidArgumentError("matrix is not orthonormal")
    if abs(np.linalg.det(m) - 1.0) > tol:
        raise InvalidArgumentError("matrix determinant is not 1")


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -w[2], w[1]],
            [w[2], 0.0, -w[0]],
            [-w[1], w[0], 0.0],
        ]
    )


def _vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(w: np.ndarray) -> Rotation:
    """Rodrigues formula; second-order Taylor coefficients near zero."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (3,) or not np.all(np.isfinite(w)):
        raise InvalidArgumentError("axis-angle must be a finite 3-vector")
    theta2 = float(w @ w)
    theta = np.sqrt(theta2)
    K = _hat(w)
    if theta < _SMALL_ANGLE:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return Rotation(np.eye(3) + a * K + b * (K @ K))


def so3_log(r: Rotation) -> np.ndarray:
    """Inverse of so3_exp with canonical angle in [0, pi]."""
    check_rotation(r.m)
    m = r.m
    cos_theta = np.clip((np.trace(m) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    skew = _vee(m - m.T)
    if theta < _SMALL_ANGLE:
        # theta/(2 sin theta) ~ 1/2 (1 + theta^2/6)
        return 0.5 * (1.0 + theta * theta / 6.0) * skew
    if np.pi - theta < _NEAR_PI:
        # (m + m^T)/2 - cos(theta) I = (1 - cos theta) a a^T: the symmetric
        # part isolates the axis without the vanishing skew term
        B = ((m + m.T) / 2.0 - cos_theta * np.eye(3)) / (1.0 - cos_theta)
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-18))
        axis = axis / np.linalg.norm(axis)
        # sign from the skew part when it still carries information
        if skew @ axis < 0.0:
            axis = -axis
        # arccos loses precision near pi; the skew norm gives sin(theta)
        sin_theta = np.clip(np.linalg.norm(skew) / 2.0, 0.0, 1.0)
        theta = np.pi - np.arcsin(sin_theta)
        return theta * axis
    return (theta / (2.0 * np.sin(theta))) * skew


def pose_compose(a: Pose, b: Pose) -> Pose:
    return Pose(Rotation(a.r.m @ b.r.m), a.r.m @ b.p + a.p)


def pose_inverse(a: Pose) -> Pose:
    rt = a.r.m.T
    return Pose(Rotation(rt.copy()), -rt @ a.p)


def geodesic_interp(r0: Rotation, r1: Rotation, t: float) -> Rotation:
    """Point at parameter t on the SO(3) geodesic from r0 to r1."""
    if not (0.0 <= t <= 1.0):
        raise InvalidArgumentError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return Rotation(r0.m.copy())
    if t == 1.0:
        return Rotation(r1.m.copy())
    w = so3_log(Rotation(r0.m.T @ r1.m))
    return Rotation(r0.m @ so3_exp(t * w).m)


def sample_uniform_rotation(rng: np.random.Generator) -> Rotation:
    """Haar-uniform rotation from a normalized 4-vector of normal draws."""
    q = rng.standard_normal(4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    m = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation(m)


def sample_gaussian_translation(rng: np.random.Generator, scale: float) -> np.ndarray:
    if scale <= 0.0:
        raise InvalidArgumentError(f"scale must be positive, got {scale}")
    return scale * rng.standard_normal(3)


def nearest_rotation(m: np.ndarray) -> Rotation:
    """Orthogonal polar factor of m, projected onto SO(3)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidArgumentError("input must be a finite 3x3 matrix")
    u, s, vt = np.linalg.svd(m)
    if np.min(s) < 1e-12:
        raise NumericalError("matrix is singular; no unique nearest rotation")
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return Rotation(r)


def rotation_angle(r: Rotation) -> float:
    """Geodesic angle of a rotation in radians."""
    return float(np.linalg.norm(so3_log(r)))


# --- serialization: 12 float64, 9 rotation entries row-major then translation ---


def pose_to_floats(pose: Pose) -> list[float]:
    return [float(v) for v in np.concatenate([pose.r.m.reshape(9), pose.p])]


def pose_from_floats(values) -> Pose:
    a = np.asarray(values, dtype=np.float64)
    if a.shape != (12,):
        raise InvalidArgumentError("pose serialization requires 12 floats")
    r = Rotation(a[:9].reshape(3, 3))
    check_rotation(r.m)
    return Pose(r, a[9:])
