"""Checkpoint and dataset persistence.

Checkpoint layout (little-endian): magic "AFCK", u32 format version,
u32 config length + UTF-8 JSON config, u32 tensor count, then per tensor
u32 name length + name, u32 rank, u32 dims, float64 payload.

Datasets are JSON-lines: one scene per line with `obs` (list of
{pose: 12 floats, feat: list, kind: str}) and `actions` (list of 12-float
poses); Euclidean datasets use `points`.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import InvalidArgumentError
from .ipa import TokenSet
from .lie import pose_from_floats, pose_to_floats
from .policy import Demonstration

CHECKPOINT_MAGIC = b"AFCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config: dict, named_tensors: list[tuple[str, np.ndarray]]) -> None:
    cfg_blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(named_tensors)))
        for name, arr in named_tensors:
            arr = np.asarray(arr, dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidArgumentError("not a checkpoint file (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", data, off)
    off += 4
    config = json.loads(data[off : off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        tensors[name] = arr.astype(np.float64)
    if off != len(data):
        raise InvalidArgumentError("trailing bytes in checkpoint file")
    return config, tensors


def load_parameters(model, tensors: dict[str, np.ndarray]) -> None:
    """Assign checkpoint tensors onto model parameters by exact name."""
    params = {p.name: p for p in model.parameters()}
    if set(params) != set(tensors):
        missing = set(params) - set(tensors)
        extra = set(tensors) - set(params)
        raise InvalidArgumentError(
            f"checkpoint/model mismatch; missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}"
        )
    for name, param in params.items():
        if tensors[name].shape != param.value.shape:
            raise InvalidArgumentError(f"shape mismatch for tensor {name!r}")
        param.value = tensors[name].copy()


# --- datasets ---


def _token_to_json(pose, feat, kind):
    return {
        "pose": pose_to_floats(pose),
        "feat": [float(v) for v in np.atleast_1d(feat)] if feat is not None else [],
        "kind": kind,
    }


def write_demos(path, demos: list[Demonstration]) -> None:
    with open(path, "w") as fh:
        for demo in demos:
            obs = demo.observation
            line = {
                "obs": [
                    _token_to_json(p, f, k)
                    for p, f, k in zip(obs.poses, obs.features, obs.kinds)
                ],
                "actions": [pose_to_floats(a) for a in demo.actions],
            }
            fh.write(json.dumps(line) + "\n")


def read_demos(path) -> list[Demonstration]:
    demos = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            poses = [pose_from_floats(tok["pose"]) for tok in doc["obs"]]
            feats = [np.asarray(tok["feat"], float) for tok in doc["obs"]]
            kinds = [tok["kind"] for tok in doc["obs"]]
            actions = [pose_from_floats(a) for a in doc["actions"]]
            demos.append(Demonstration(TokenSet(poses, feats, kinds), actions))
    return demos


def write_points(path, points: np.ndarray) -> None:
    with open(path, "w") as fh:
        for p in np.asarray(points, float):
            fh.write(json.dumps({"points": [[float(v) for v in p]]}) + "\n")


def read_points(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rows.extend(json.loads(line)["points"])
    return np.asarray(rows, float)
