"""Run configuration: JSON document validated against the dataclass
schemas, with unknown keys rejected to guard against silent typos."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .exceptions import InvalidArgumentError
from .ipa import InvariantTransformer, IpaConfig
from .lie import identity_pose, pose_from_floats, pose_to_floats
from .policy import EuclidFlowModel, TrainConfig
from .tasks import TaskSpec

SCHEDULE_KINDS = ("linear", "exponential")


def _build(cls, doc: dict, name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise InvalidArgumentError(f"unknown keys in {name}: {sorted(unknown)}")
    return cls(**doc)


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: str = "linear"
    k_sample: int = 100
    train_steps: int | None = None  # overrides epochs-derived step count for euclid
    data_scale: float = 1.0  # euclid tasks: internal normalization divisor

    def __post_init__(self):
        if self.schedule not in SCHEDULE_KINDS:
            raise InvalidArgumentError(f"schedule must be one of {SCHEDULE_KINDS}")
        if self.k_sample < 1:
            raise InvalidArgumentError("k_sample must be at least 1")


def run_config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise InvalidArgumentError("config must be a JSON object")
    doc = dict(doc)
    allowed = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - allowed
    if unknown:
        raise InvalidArgumentError(f"unknown keys in config: {sorted(unknown)}")
    task_doc = dict(doc.pop("task", {}))
    if "grasp_offset" in task_doc:
        task_doc["grasp_offset"] = pose_from_floats(task_doc["grasp_offset"])
    if "trans_range" in task_doc:
        task_doc["trans_range"] = tuple(tuple(r) for r in task_doc["trans_range"])
    task = _build(TaskSpec, task_doc, "task")
    train_doc = dict(doc.pop("train", {}))
    ipa = _build(IpaConfig, dict(train_doc.pop("ipa", {})), "train.ipa")
    train = _build(TrainConfig, {**train_doc, "ipa": ipa}, "train")
    return RunConfig(task=task, train=train, **doc)


def run_config_to_dict(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc["task"]["grasp_offset"] = pose_to_floats(cfg.task.grasp_offset)
    doc["task"]["trans_range"] = [list(r) for r in cfg.task.trans_range]
    return doc


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"config is not valid JSON: {e}") from e
    return run_config_from_dict(doc)


OBS_FEAT_DIM = 2  # one-hot token identity in the synthetic reach task


def build_pose_policy(cfg: RunConfig) -> InvariantTransformer:
    rng = np.random.default_rng([cfg.train.seed, 0x5E3])
    return InvariantTransformer(
        cfg.train.ipa,
        obs_feat_dim=OBS_FEAT_DIM,
        n_action_tokens=cfg.task.n_actions,
        rng=rng,
        adaptation_scale=cfg.train.adaptation_scale,
    )


def build_euclid_policy(cfg: RunConfig, dim: int = 2) -> EuclidFlowModel:
    rng = np.random.default_rng([cfg.train.seed, 0x5E3])
    return EuclidFlowModel(cfg.train.ipa, dim, rng, data_scale=cfg.data_scale)


def build_model(cfg: RunConfig):
    """Model for the configured task; euclid tasks get the point-flow
    variant, se3-reach the pose policy."""
    if cfg.task.kind in ("eight-gaussians", "two-moons"):
        return build_euclid_policy(cfg)
    return build_pose_policy(cfg)
