"""SE(3) flow-matching policies built on invariant point attention."""

from . import autodiff, config, flow, ipa, lie, nn, policy, serialization, tasks

__all__ = [
    "autodiff",
    "config",
    "flow",
    "ipa",
    "lie",
    "nn",
    "policy",
    "serialization",
    "tasks",
]

__version__ = "0.1.0"
