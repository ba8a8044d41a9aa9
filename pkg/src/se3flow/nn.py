"""Learnable building blocks: linear layers, multi-head self-attention,
pre-norm transformer encoder blocks, and sinusoidal time embedding."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .exceptions import InvalidArgumentError, ShapeError


def _uniform_init(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


class Linear:
    """y = x W^T + b with weight (out, in)."""

    def __init__(self, in_dim, out_dim, rng=None, name="linear", zero_init=False):
        if zero_init:
            w = np.zeros((out_dim, in_dim))
        else:
            w = _uniform_init(rng, out_dim, in_dim)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), f"{name}.bias")

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected last dim {self.in_dim}, got {x.shape[-1]}")
        w = tape.watch(self.weight)
        b = tape.watch(self.bias)
        return ad.add(ad.matmul(x, ad.transpose(w, (1, 0))), b)

    def parameters(self):
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, dim, name="ln", eps=1e-6):
        self.eps = eps
        self.gain = Parameter(np.ones(dim), f"{name}.gain")
        self.bias = Parameter(np.zeros(dim), f"{name}.bias")

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        return ad.layernorm(x, tape.watch(self.gain), tape.watch(self.bias), self.eps)

    def parameters(self):
        return [self.gain, self.bias]


class MultiHeadAttention:
    """Scaled dot-product self-attention over the token axis."""

    def __init__(self, width, n_heads, rng, name="mha"):
        if width % n_heads != 0:
            raise InvalidArgumentError("head count must divide model width")
        self.width = width
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.wq = Linear(width, width, rng, f"{name}.wq")
        self.wk = Linear(width, width, rng, f"{name}.wk")
        self.wv = Linear(width, width, rng, f"{name}.wv")
        self.wo = Linear(width, width, rng, f"{name}.wo")

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        # x: [..., n, width]; works for [n, w] and [batch, n, w]
        lead = x.shape[:-2]
        n = x.shape[-2]
        h, d = self.n_heads, self.head_dim

        def split_heads(t):
            t = ad.reshape(t, lead + (n, h, d))
            axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
            return ad.transpose(t, axes)  # [..., h, n, d]

        q = split_heads(self.wq(tape, x))
        k = split_heads(self.wk(tape, x))
        v = split_heads(self.wv(tape, x))
        kt_axes = tuple(range(len(lead) + 1)) + (len(lead) + 2, len(lead) + 1)
        logits = ad.scale(ad.matmul(q, ad.transpose(k, kt_axes)), 1.0 / np.sqrt(d))
        attn = ad.softmax(logits, axis=-1)
        out = ad.matmul(attn, v)  # [..., h, n, d]
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        out = ad.reshape(ad.transpose(out, axes), lead + (n, self.width))
        return self.wo(tape, out)

    def parameters(self):
        return [p for lin in (self.wq, self.wk, self.wv, self.wo) for p in lin.parameters()]


class EncoderBlock:
    """Pre-norm residual block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, width, n_heads, rng, ff_mult=4, name="enc"):
        self.ln1 = LayerNorm(width, f"{name}.ln1")
        self.mha = MultiHeadAttention(width, n_heads, rng, f"{name}.mha")
        self.ln2 = LayerNorm(width, f"{name}.ln2")
        self.ff1 = Linear(width, ff_mult * width, rng, f"{name}.ff1")
        self.ff2 = Linear(ff_mult * width, width, rng, f"{name}.ff2")

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        x = ad.add(x, self.mha(tape, self.ln1(tape, x)))
        return ad.add(x, self.ff2(tape, ad.gelu(self.ff1(tape, self.ln2(tape, x)))))

    def parameters(self):
        return (
            self.ln1.parameters()
            + self.mha.parameters()
            + self.ln2.parameters()
            + self.ff1.parameters()
            + self.ff2.parameters()
        )


class TimeEmbedding:
    """Sinusoidal features at geometrically spaced frequencies, projected."""

    def __init__(self, dim, width, rng, max_freq=20.0, name="time"):
        if dim % 2 != 0:
            raise InvalidArgumentError("time embedding dimension must be even")
        self.dim = dim
        self.freqs = np.geomspace(1.0, max_freq, dim // 2)
        self.proj = Linear(dim, width, rng, f"{name}.proj")

    def __call__(self, tape: Tape, t) -> Tensor:
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
            raise InvalidArgumentError("t must lie in [0, 1]")
        phases = t_arr[:, None] * self.freqs[None, :]
        feats = np.concatenate([np.sin(phases), np.cos(phases)], axis=-1)
        if np.isscalar(t) or np.asarray(t).ndim == 0:
            feats = feats[0]
        return self.proj(tape, Tensor(feats))

    def parameters(self):
        return self.proj.parameters()
