"""Finite-difference verification of every learnable layer type and the
assembled vector-field network."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport, Tensor, grad_check
from .ipa import InvariantTransformer, IpaConfig, IpaLayer
from .nn import EncoderBlock, LayerNorm, Linear, MultiHeadAttention, TimeEmbedding


def _scalar(t):
    return ad.reduce(ad.square(t), "sum")


def _random_frames(rng, b, n):
    from .lie import sample_uniform_rotation

    rot = np.stack([[sample_uniform_rotation(rng).m for _ in range(n)] for _ in range(b)])
    trans = rng.uniform(-1.0, 1.0, size=(b, n, 3))
    return rot, trans


def run_all_grad_checks(seed=0, tol=1e-4, probes_per_param=40, step=1e-5):
    """Returns {check name: GradCheckReport}."""
    rng = np.random.default_rng(seed)
    reports: dict[str, GradCheckReport] = {}

    x_lin = rng.uniform(-2, 2, size=(5, 8))
    lin = Linear(8, 6, rng, "lin")
    reports["linear"] = grad_check(
        lambda tape: _scalar(lin(tape, Tensor(x_lin))),
        lin.parameters(), step, tol, rng, probes_per_param,
    )

    x_ln = rng.uniform(-2, 2, size=(4, 8))
    ln = LayerNorm(8, "ln")
    ln.gain.value = rng.uniform(0.5, 1.5, size=8)
    ln.bias.value = rng.uniform(-0.5, 0.5, size=8)
    reports["layernorm"] = grad_check(
        lambda tape: _scalar(ad.layernorm(Tensor(x_ln), tape.watch(ln.gain), tape.watch(ln.bias))),
        ln.parameters(), step, tol, rng, probes_per_param,
    )

    x_mha = rng.uniform(-1, 1, size=(5, 16))
    mha = MultiHeadAttention(16, 4, rng, "mha")
    reports["mha"] = grad_check(
        lambda tape: _scalar(mha(tape, Tensor(x_mha))),
        mha.parameters(), step, tol, rng, probes_per_param,
    )

    x_enc = rng.uniform(-1, 1, size=(4, 16))
    enc = EncoderBlock(16, 4, rng, name="enc")
    reports["encoder_block"] = grad_check(
        lambda tape: _scalar(enc(tape, Tensor(x_enc))),
        enc.parameters(), step, tol, rng, probes_per_param,
    )

    temb = TimeEmbedding(16, 16, rng)
    reports["time_embedding"] = grad_check(
        lambda tape: _scalar(temb(tape, 0.37)),
        temb.parameters(), step, tol, rng, probes_per_param,
    )

    cfg = IpaConfig(n_head=2, c=4, n_query_points=2, n_point_values=3, n_ipa_layers=1, width=16)
    ipa = IpaLayer(cfg, rng, "ipa")
    rot, trans = _random_frames(rng, 2, 4)
    x_ipa = rng.uniform(-1, 1, size=(2, 4, 16))
    reports["ipa_layer"] = grad_check(
        lambda tape: _scalar(ipa(tape, Tensor(x_ipa), rot, trans)),
        ipa.parameters(), step, tol, rng, probes_per_param,
    )

    model_cfg = IpaConfig(n_head=2, c=4, n_query_points=2, n_point_values=3, n_ipa_layers=2, width=16)
    model = InvariantTransformer(model_cfg, obs_feat_dim=2, n_action_tokens=2, rng=rng,
                                 adaptation_scale=1.0)
    # non-zero head so its gradient path is exercised
    model.head.weight.value = rng.uniform(-0.1, 0.1, size=model.head.weight.value.shape)
    m_rot, m_trans = _random_frames(rng, 2, 4)
    obs = rng.uniform(-1, 1, size=(2, 2, 2))
    anchor_rot, anchor_trans = m_rot[:, 0], m_trans[:, 0]
    reports["full_model"] = grad_check(
        lambda tape: _scalar(
            model.forward_arrays(tape, m_rot, m_trans, obs, np.array([0.2, 0.7]),
                                 anchor_rot, anchor_trans)
        ),
        model.parameters(), step, tol, rng, probes_per_param,
    )
    return reports
