"""Synthetic datasets and evaluation metrics: eight-gaussians and
two-moons point sets for the Euclidean flow path, and a desk-scale SE(3)
reach task whose expert is equivariant by construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lie
from .exceptions import InvalidArgumentError
from .ipa import TokenSet
from .lie import Pose, Rotation
from .policy import Demonstration

EIGHT_GAUSSIANS_RADIUS = 4.0
EIGHT_GAUSSIANS_STD = 0.1


@dataclass
class TaskSpec:
    kind: str = "se3-reach"
    n_demos: int = 200
    seed: int = 0
    noise: float = 0.0
    n_actions: int = 8
    trans_range: tuple = ((-0.5, 0.5), (-0.5, 0.5), (-0.5, 0.5))
    grasp_offset: Pose = field(default_factory=lie.identity_pose)

    def __post_init__(self):
        if self.kind not in ("eight-gaussians", "two-moons", "se3-reach"):
            raise InvalidArgumentError(f"unknown task kind {self.kind!r}")
        if self.n_demos < 1:
            raise InvalidArgumentError("n_demos must be at least 1")
        if self.noise < 0.0:
            raise InvalidArgumentError("noise must be non-negative")
        for lo, hi in self.trans_range:
            if lo > hi:
                raise InvalidArgumentError("translation ranges must be well-ordered")


def eight_gaussian_modes() -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(8) / 8.0
    return EIGHT_GAUSSIANS_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def gen_eight_gaussians(n: int, seed: int) -> np.ndarray:
    """n 2D points split equally among 8 modes on a radius-4 circle."""
    if n < 8:
        raise InvalidArgumentError("need at least 8 points")
    rng = np.random.default_rng(seed)
    modes = eight_gaussian_modes()
    centers = modes[np.arange(n) % 8]
    return centers + EIGHT_GAUSSIANS_STD * rng.standard_normal((n, 2))


def gen_two_moons(n: int, seed: int, noise: float = 0.05) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n_top = n // 2
    theta_top = np.pi * rng.uniform(size=n_top)
    theta_bot = np.pi * rng.uniform(size=n - n_top)
    top = np.stack([np.cos(theta_top), np.sin(theta_top)], axis=-1)
    bot = np.stack([1.0 - np.cos(theta_bot), 0.5 - np.sin(theta_bot)], axis=-1)
    pts = np.concatenate([top, bot])
    return pts + noise * rng.standard_normal(pts.shape)


def _random_z_rotation(rng: np.random.Generator) -> Rotation:
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return lie.so3_exp(np.array([0.0, 0.0, angle]))


def _expert_actions(agent: Pose, target: Pose, n_actions: int) -> list[Pose]:
    """Interpolated approach from the agent pose to the target pose; the
    final action equals the target exactly."""
    actions = []
    for i in range(1, n_actions + 1):
        t = i / n_actions
        p = t * target.p + (1.0 - t) * agent.p
        r = lie.geodesic_interp(agent.r, target.r, t)
        actions.append(Pose(r, p))
    return actions


def gen_se3_reach(spec: TaskSpec) -> list[Demonstration]:
    """Scenes with an agent at the origin and a randomly placed object; the
    expert action sequence reaches object composed with the grasp offset."""
    rng = np.random.default_rng(spec.seed)
    demos = []
    for _ in range(spec.n_demos):
        p_obj = np.array([rng.uniform(lo, hi) for lo, hi in spec.trans_range])
        obj = Pose(_random_z_rotation(rng), p_obj)
        agent = lie.identity_pose()
        target = lie.pose_compose(obj, spec.grasp_offset)
        actions = _expert_actions(agent, target, spec.n_actions)
        if spec.noise > 0.0:
            noisy = []
            for a in actions:
                dp = spec.noise * rng.standard_normal(3)
                dw = spec.noise * rng.standard_normal(3)
                noisy.append(
                    Pose(Rotation(a.r.m @ lie.so3_exp(dw).m), a.p + dp)
                )
            actions = noisy
        obs = TokenSet(
            poses=[agent, obj],
            features=[np.array([1.0, 0.0]), np.array([0.0, 1.0])],
            kinds=["agent", "object"],
        )
        demos.append(Demonstration(obs, actions))
    return demos


def pose_error(pred: Pose, target: Pose) -> tuple[float, float]:
    """Translation distance and rotation geodesic angle in degrees."""
    dt = float(np.linalg.norm(pred.p - target.p))
    dr = np.degrees(lie.rotation_angle(Rotation(pred.r.m.T @ target.r.m)))
    return dt, float(dr)


@dataclass
class ModeCoverage:
    covered_modes: int
    fraction_within_radius: float


def mode_coverage(samples: np.ndarray, modes: np.ndarray, radius: float) -> ModeCoverage:
    """Assign each sample to its nearest mode; a mode counts as covered if
    at least one of its assigned samples lies within `radius`."""
    if radius <= 0.0:
        raise InvalidArgumentError("radius must be positive")
    samples = np.asarray(samples, float)
    modes = np.asarray(modes, float)
    d = np.linalg.norm(samples[:, None, :] - modes[None, :, :], axis=-1)
    nearest = d.argmin(axis=1)
    dist = d[np.arange(len(samples)), nearest]
    within = dist <= radius
    covered = len(np.unique(nearest[within]))
    return ModeCoverage(covered, float(within.mean()))
