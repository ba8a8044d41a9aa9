"""Conditional flow matching: rectified linear flows, target velocities,
Euler samplers, and inference schedules, in Euclidean space and on SE(3).

Translation targets use the division-free constant form r_t^T (p1 - p0),
which equals r_t^T (p1 - p_t)/(1-t) and avoids the t -> 1 singularity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lie
from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import InvalidArgumentError, ShapeError
from .lie import Pose, Rotation


@dataclass(frozen=True)
class EuclidFlowSample:
    t: float
    a0: np.ndarray
    a1: np.ndarray
    a_t: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class Se3FlowSample:
    t: float
    T0: Pose
    T1: Pose
    T_t: Pose
    v_p_target: np.ndarray
    v_r_target: np.ndarray


@dataclass(frozen=True)
class Schedule:
    timesteps: np.ndarray  # strictly increasing, t_0 = 0, t_K = 1
    kind: str

    @property
    def n_steps(self) -> int:
        return len(self.timesteps) - 1


def euclid_flow_point(a0, a1, t: float) -> np.ndarray:
    a0, a1 = np.asarray(a0, float), np.asarray(a1, float)
    if a0.shape != a1.shape:
        raise ShapeError("endpoints must have equal dimension")
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError("t must lie in [0, 1]")
    return t * a1 + (1.0 - t) * a0


def euclid_target(a0, a1) -> np.ndarray:
    a0, a1 = np.asarray(a0, float), np.asarray(a1, float)
    if a0.shape != a1.shape:
        raise ShapeError("endpoints must have equal dimension")
    return a1 - a0


def euler_step_euclid(a, v, dt: float) -> np.ndarray:
    a, v = np.asarray(a, float), np.asarray(v, float)
    if a.shape != v.shape:
        raise ShapeError("state and velocity must have equal dimension")
    return a + v * dt


def se3_flow_point(T0: Pose, T1: Pose, t: float) -> Pose:
    """Translation lerp plus rotation geodesic at parameter t."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError("t must lie in [0, 1]")
    p = t * T1.p + (1.0 - t) * T0.p
    r = lie.geodesic_interp(T0.r, T1.r, t)
    return Pose(r, p)


def se3_target(T0: Pose, T1: Pose, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Body-frame target velocities (v_p, v_r) of the rectified SE(3) flow."""
    if not 0.0 <= t < 1.0:
        raise InvalidArgumentError("t must lie in [0, 1)")
    v_r = lie.so3_log(Rotation(T0.r.m.T @ T1.r.m))
    r_t = lie.geodesic_interp(T0.r, T1.r, t)
    v_p = r_t.m.T @ (T1.p - T0.p)
    return v_p, v_r


def make_se3_sample(T0: Pose, T1: Pose, t: float) -> Se3FlowSample:
    v_p, v_r = se3_target(T0, T1, t)
    return Se3FlowSample(t, T0, T1, se3_flow_point(T0, T1, t), v_p, v_r)


def euler_step_se3(T_k: Pose, v_p, v_r, dt: float) -> Pose:
    """One body-frame Euler update: the translation velocity is rotated to
    the world frame by the current rotation; the rotation update is applied
    on the right and re-projected onto SO(3)."""
    if dt <= 0.0:
        raise InvalidArgumentError("dt must be positive")
    v_p = np.asarray(v_p, float)
    v_r = np.asarray(v_r, float)
    p = T_k.p + T_k.r.m @ v_p * dt
    r = lie.nearest_rotation(T_k.r.m @ lie.so3_exp(dt * v_r).m)
    return Pose(r, p)


def make_schedule(k: int, kind: str = "linear", first_last_ratio: float = 4.0) -> Schedule:
    """Integration grid over [0, 1]. `exponential` spaces steps so the
    first is `first_last_ratio` times the size of the last (denser near 1)."""
    if k < 1:
        raise InvalidArgumentError("step count must be at least 1")
    if kind == "linear":
        ts = np.linspace(0.0, 1.0, k + 1)
    elif kind == "exponential":
        if k == 1:
            ts = np.array([0.0, 1.0])
        else:
            gamma = first_last_ratio ** (-1.0 / (k - 1))
            ts = (gamma ** np.arange(k + 1) - 1.0) / (gamma**k - 1.0)
            ts[0], ts[-1] = 0.0, 1.0
    else:
        raise InvalidArgumentError(f"unknown schedule kind {kind!r}")
    return Schedule(ts, kind)


def cfm_loss(pred_vp, pred_vr, target_vp, target_vr) -> Tensor:
    """Squared-error flow-matching loss: summed over action tokens and
    velocity components, averaged over the batch. Inputs are [B, N, 3]."""
    pred_vp, pred_vr = ad._as_tensor(pred_vp), ad._as_tensor(pred_vr)
    if pred_vp.shape != np.shape(target_vp) or pred_vr.shape != np.shape(target_vr):
        raise ShapeError("prediction and target shapes differ")
    batch = pred_vp.shape[0]
    err = ad.add(
        ad.reduce(ad.square(ad.sub(pred_vp, Tensor(target_vp))), "sum"),
        ad.reduce(ad.square(ad.sub(pred_vr, Tensor(target_vr))), "sum"),
    )
    return ad.scale(err, 1.0 / batch)


def sample_prior_pose(rng: np.random.Generator, translation_scale: float = 1.0) -> Pose:
    """Haar-uniform rotation with an isotropic Gaussian translation."""
    r = lie.sample_uniform_rotation(rng)
    p = lie.sample_gaussian_translation(rng, translation_scale)
    return Pose(r, p)
