"""Policy assembly: flow-matching training, iterative action generation,
the equivariance checker, and evaluation metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import flow, lie
from .autodiff import Parameter, Tape, Tensor
from .exceptions import InvalidArgumentError, NumericalError
from .ipa import InvariantTransformer, IpaConfig, TokenSet
from .lie import Pose, Rotation


@dataclass
class Demonstration:
    observation: TokenSet
    actions: list[Pose]

    def __post_init__(self):
        if len(self.actions) < 1:
            raise InvalidArgumentError("a demonstration needs at least one action")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-4
    k_train: int = 100
    seed: int = 0
    adaptation_scale: float = 10.0
    prior_translation_scale: float = 1.0
    ipa: IpaConfig = field(default_factory=IpaConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.k_train < 1:
            raise InvalidArgumentError("epochs, batch size, and k_train must be positive")
        if self.learning_rate < 0.0:
            raise InvalidArgumentError("learning rate must be non-negative")
        if self.adaptation_scale <= 0.0 or self.prior_translation_scale <= 0.0:
            raise InvalidArgumentError("scales must be positive")


class Adam:
    def __init__(self, params: list[Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {id(p): np.zeros_like(p.value) for p in params}
        self.v = {id(p): np.zeros_like(p.value) for p in params}

    def step(self, grads: dict[Parameter, np.ndarray]):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            m = self.m[id(p)] = b1 * self.m[id(p)] + (1 - b1) * g
            v = self.v[id(p)] = b2 * self.v[id(p)] + (1 - b2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _sample_prior_in_anchor(rng, anchor_rot, anchor_trans, scale) -> Pose:
    """Prior pose drawn in the anchor frame, returned in world coordinates."""
    local = flow.sample_prior_pose(rng, scale)
    r = Rotation(anchor_rot @ local.r.m)
    p = anchor_rot @ local.p + anchor_trans
    return Pose(r, p)


def _batch_arrays(model: InvariantTransformer, batch: list[Demonstration]):
    obs_sets = [d.observation for d in batch]
    anchor_rot, anchor_trans = model.anchor_pose_arrays(obs_sets)
    obs_feats = np.stack([ts.obs_feature_matrix() for ts in obs_sets])
    obs_rot = np.stack([ts.rotation_array() for ts in obs_sets])
    obs_trans = np.stack([ts.translation_array() for ts in obs_sets])
    return obs_feats, obs_rot, obs_trans, anchor_rot, anchor_trans


def train_step(
    model: InvariantTransformer,
    batch: list[Demonstration],
    rng: np.random.Generator,
    config: TrainConfig,
    optimizer: Adam,
) -> float:
    """One flow-matching step: draw (t, prior poses) per demonstration,
    interpolate, regress target velocities, and apply one Adam update."""
    if not batch:
        raise InvalidArgumentError("empty batch")
    B = len(batch)
    N = model.n_action_tokens
    obs_feats, obs_rot, obs_trans, anchor_rot, anchor_trans = _batch_arrays(model, batch)

    act_rot = np.empty((B, N, 3, 3))
    act_trans = np.empty((B, N, 3))
    target_vp = np.empty((B, N, 3))
    target_vr = np.empty((B, N, 3))
    t_vec = np.empty(B)
    for b, demo in enumerate(batch):
        t = rng.uniform(0.0, 1.0)
        while t >= 1.0:  # guard the open interval
            t = rng.uniform(0.0, 1.0)
        t_vec[b] = t
        for j, t1 in enumerate(demo.actions):
            t0 = _sample_prior_in_anchor(
                rng, anchor_rot[b], anchor_trans[b], config.prior_translation_scale
            )
            sample = flow.make_se3_sample(t0, t1, t)
            act_rot[b, j] = sample.T_t.r.m
            act_trans[b, j] = sample.T_t.p
            target_vp[b, j] = sample.v_p_target
            target_vr[b, j] = sample.v_r_target

    rot = np.concatenate([obs_rot, act_rot], axis=1)
    trans = np.concatenate([obs_trans, act_trans], axis=1)

    tape = Tape()
    out = model.forward_arrays(tape, rot, trans, obs_feats, t_vec, anchor_rot, anchor_trans)
    pred_vp = ad.narrow(out, -1, 0, 3)
    pred_vr = ad.narrow(out, -1, 3, 3)
    loss = flow.cfm_loss(pred_vp, pred_vr, target_vp, target_vr)
    if not np.isfinite(loss.data):
        raise NumericalError(f"non-finite training loss at step {optimizer.step_count}")
    tape.backward(loss)
    optimizer.step(tape.param_grads())
    return float(loss.data)


def train(
    model: InvariantTransformer,
    demos: list[Demonstration],
    config: TrainConfig,
    log_fn=None,
) -> list[tuple[int, int, float]]:
    """Full training loop; returns (epoch, step, loss) history."""
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.parameters(), config.learning_rate)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(demos))
        for start in range(0, len(demos), config.batch_size):
            batch = [demos[i] for i in order[start : start + config.batch_size]]
            loss = train_step(model, batch, rng, config, optimizer)
            history.append((epoch, step, loss))
            if log_fn is not None:
                log_fn(epoch, step, loss)
            step += 1
    return history


def _observation_with_actions(observation: TokenSet, action_poses: list[Pose]) -> TokenSet:
    poses = observation.poses + action_poses
    feats = observation.features + [None] * len(action_poses)
    kinds = observation.kinds + ["action"] * len(action_poses)
    return TokenSet(poses, feats, kinds)


def generate_actions(
    model: InvariantTransformer,
    observation: TokenSet,
    k: int,
    schedule_kind: str = "linear",
    rng: np.random.Generator | None = None,
    initial_poses: list[Pose] | None = None,
    prior_translation_scale: float = 1.0,
    world_frame_bug: bool = False,
) -> list[Pose]:
    """Integrate the learned vector field from prior poses to actions.

    `world_frame_bug` skips the body-to-world rotation of the translation
    velocity; it exists as a negative control for the equivariance checks.
    """
    if observation.n_actions != 0:
        raise InvalidArgumentError("observation must contain no action tokens")
    N = model.n_action_tokens
    anchor_rot, anchor_trans = model.anchor_pose_arrays([observation])
    if initial_poses is None:
        if rng is None:
            raise InvalidArgumentError("provide either rng or initial poses")
        initial_poses = [
            _sample_prior_in_anchor(rng, anchor_rot[0], anchor_trans[0], prior_translation_scale)
            for _ in range(N)
        ]
    if len(initial_poses) != N:
        raise InvalidArgumentError(f"expected {N} initial poses, got {len(initial_poses)}")

    schedule = flow.make_schedule(k, schedule_kind)
    poses = list(initial_poses)
    obs_feats = observation.obs_feature_matrix()[None] if observation.n_obs else None
    obs_rot = observation.rotation_array()
    obs_trans = observation.translation_array()
    ts = schedule.timesteps
    for i in range(schedule.n_steps):
        t, dt = ts[i], ts[i + 1] - ts[i]
        rot = np.concatenate([obs_rot, np.stack([p.r.m for p in poses])])[None]
        trans = np.concatenate([obs_trans, np.stack([p.p for p in poses])])[None]
        out = model.forward_arrays(
            ad.InferenceContext(), rot, trans, obs_feats, t, anchor_rot, anchor_trans
        ).data[0]
        new_poses = []
        for j, pose in enumerate(poses):
            v_p, v_r = out[j, :3], out[j, 3:]
            if world_frame_bug:
                p_next = pose.p + v_p * dt
                r_next = lie.nearest_rotation(pose.r.m @ lie.so3_exp(dt * v_r).m)
                new_poses.append(Pose(r_next, p_next))
            else:
                new_poses.append(flow.euler_step_se3(pose, v_p, v_r, dt))
        poses = new_poses
    return poses


def transform_tokenset(tokens: TokenSet, delta: Pose) -> TokenSet:
    poses = [lie.pose_compose(delta, p) for p in tokens.poses]
    return TokenSet(poses, list(tokens.features), list(tokens.kinds))


@dataclass
class EquivarianceReport:
    max_translation_deviation: float
    max_rotation_deviation_rad: float


def check_equivariance(
    model: InvariantTransformer,
    observation: TokenSet,
    delta: Pose,
    seed: int,
    k: int,
    schedule_kind: str = "linear",
    prior_translation_scale: float = 1.0,
    world_frame_bug: bool = False,
) -> EquivarianceReport:
    """Generate actions twice, once from the Delta-transformed scene with
    the same initial noise left-multiplied by Delta, and compare."""
    N = model.n_action_tokens
    anchor_rot, anchor_trans = model.anchor_pose_arrays([observation])
    rng = np.random.default_rng(seed)
    init = [
        _sample_prior_in_anchor(rng, anchor_rot[0], anchor_trans[0], prior_translation_scale)
        for _ in range(N)
    ]
    base = generate_actions(
        model, observation, k, schedule_kind, initial_poses=init, world_frame_bug=world_frame_bug
    )
    moved_obs = transform_tokenset(observation, delta)
    moved_init = [lie.pose_compose(delta, p) for p in init]
    moved = generate_actions(
        model, moved_obs, k, schedule_kind, initial_poses=moved_init, world_frame_bug=world_frame_bug
    )
    dt_max, dr_max = 0.0, 0.0
    for a, b in zip(base, moved):
        expect = lie.pose_compose(delta, a)
        dt_max = max(dt_max, float(np.linalg.norm(expect.p - b.p)))
        dr_max = max(dr_max, lie.rotation_angle(Rotation(expect.r.m.T @ b.r.m)))
    return EquivarianceReport(dt_max, dr_max)


@dataclass
class EvalMetrics:
    mean_translation_error: float
    max_translation_error: float
    mean_rotation_error_deg: float
    max_rotation_error_deg: float
    per_scene: list[tuple[float, float]]
    mean_latency_s: float


def evaluate(
    model: InvariantTransformer,
    demos: list[Demonstration],
    k: int,
    schedule_kind: str = "linear",
    seed: int = 0,
    prior_translation_scale: float = 1.0,
) -> EvalMetrics:
    """Roll out the policy per scene and compare the final generated pose
    against the final expert action pose."""
    per_scene = []
    latencies = []
    for i, demo in enumerate(demos):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        actions = generate_actions(
            model,
            demo.observation,
            k,
            schedule_kind,
            rng=rng,
            prior_translation_scale=prior_translation_scale,
        )
        latencies.append(time.perf_counter() - start)
        dt = float(np.linalg.norm(actions[-1].p - demo.actions[-1].p))
        dr = np.degrees(lie.rotation_angle(Rotation(actions[-1].r.m.T @ demo.actions[-1].r.m)))
        per_scene.append((dt, float(dr)))
    trans = np.array([s[0] for s in per_scene])
    rot = np.array([s[1] for s in per_scene])
    return EvalMetrics(
        float(trans.mean()),
        float(trans.max()),
        float(rot.mean()),
        float(rot.max()),
        per_scene,
        float(np.mean(latencies)),
    )


# --- Euclidean flow-matching policy (same transformer stack, identity poses) ---


class EuclidFlowModel:
    """Vector-field network over d-dimensional points. The current point
    enters through an auxiliary projection on a single action token whose
    pose stays at identity; the head's first d outputs are the velocity."""

    def __init__(self, config: IpaConfig, dim: int, rng, data_scale: float = 1.0):
        if dim < 1 or dim > 6:
            raise InvalidArgumentError("point dimension must be in 1..6")
        self.dim = dim
        self.data_scale = data_scale
        self.net = InvariantTransformer(
            config, obs_feat_dim=0, n_action_tokens=1, rng=rng, adaptation_scale=1.0, aux_dim=dim
        )

    def parameters(self):
        return self.net.parameters()

    def velocity(self, tape, points: np.ndarray, t) -> Tensor:
        """points: [B, d] in normalized coordinates; returns [B, d]."""
        B = points.shape[0]
        rot = np.broadcast_to(np.eye(3), (B, 1, 3, 3))
        trans = np.zeros((B, 1, 3))
        out = self.net.forward_arrays(tape, rot, trans, None, t, aux=points[:, None, :])
        return ad.reshape(ad.narrow(out, -1, 0, self.dim), (B, self.dim))


def train_euclid(
    model: EuclidFlowModel,
    points: np.ndarray,
    config: TrainConfig,
    steps: int | None = None,
    log_fn=None,
) -> list[tuple[int, int, float]]:
    """Rectified-flow regression on a Euclidean point dataset."""
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(model.parameters(), config.learning_rate)
    data = np.asarray(points, float) / model.data_scale
    n = len(data)
    history = []
    total_steps = steps if steps is not None else config.epochs * max(1, n // config.batch_size)
    for step in range(total_steps):
        idx = rng.integers(0, n, size=config.batch_size)
        a1 = data[idx]
        a0 = rng.standard_normal(a1.shape)
        t = rng.uniform(0.0, 1.0, size=config.batch_size)
        a_t = t[:, None] * a1 + (1.0 - t[:, None]) * a0
        target = a1 - a0
        tape = Tape()
        pred = model.velocity(tape, a_t, t)
        diff = ad.sub(pred, Tensor(target))
        loss = ad.scale(ad.reduce(ad.square(diff), "sum"), 1.0 / config.batch_size)
        if not np.isfinite(loss.data):
            raise NumericalError(f"non-finite training loss at step {step}")
        tape.backward(loss)
        optimizer.step(tape.param_grads())
        history.append((0, step, float(loss.data)))
        if log_fn is not None:
            log_fn(0, step, float(loss.data))
    return history


def sample_euclid(
    model: EuclidFlowModel,
    n: int,
    k: int,
    schedule_kind: str = "linear",
    rng: np.random.Generator | None = None,
    initial: np.ndarray | None = None,
) -> np.ndarray:
    """Euler-integrate the learned field from Gaussian noise; returns [n, d]."""
    if initial is None:
        if rng is None:
            raise InvalidArgumentError("provide either rng or initial points")
        a = rng.standard_normal((n, model.dim))
    else:
        a = np.asarray(initial, float).copy()
    schedule = flow.make_schedule(k, schedule_kind)
    ts = schedule.timesteps
    for i in range(schedule.n_steps):
        v = model.velocity(ad.InferenceContext(), a, ts[i]).data
        a = a + v * (ts[i + 1] - ts[i])
    return a * model.data_scale
