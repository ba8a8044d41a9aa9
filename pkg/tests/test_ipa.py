"""Invariant point attention layer and the invariant transformer."""

import numpy as np
import pytest

import se3flow.autodiff as ad
from se3flow import lie
from se3flow.exceptions import InvalidArgumentError
from se3flow.ipa import (
    InvariantTransformer,
    IpaConfig,
    IpaLayer,
    TokenSet,
    adaptation_normalize,
    invariant_transformer_forward,
    ipa_constants,
    ipa_layer_forward,
)
from se3flow.lie import Pose, Rotation


def random_pose(rng, trans_scale=2.0):
    r = lie.sample_uniform_rotation(rng)
    p = rng.uniform(-trans_scale, trans_scale, size=3)
    return Pose(r, p)


def random_token_set(rng, n_obs, n_act, feat_dim=2):
    poses = [random_pose(rng) for _ in range(n_obs + n_act)]
    feats = [rng.standard_normal(feat_dim) for _ in range(n_obs)] + [None] * n_act
    kinds = ["agent"] + ["object"] * (n_obs - 1) + ["action"] * n_act
    return TokenSet(poses, feats, kinds)


def transform_token_set(tokens, delta):
    poses = [lie.pose_compose(delta, p) for p in tokens.poses]
    return TokenSet(poses, list(tokens.features), list(tokens.kinds))


class TestIpaConstants:
    def test_scalar_weight_c16(self):
        w_l, _ = ipa_constants(IpaConfig(c=16))
        assert w_l == pytest.approx(1.0 / np.sqrt(48.0), abs=1e-12)
        assert w_l == pytest.approx(0.144338, abs=1e-6)

    def test_point_weight_four_query_points(self):
        _, w_c = ipa_constants(IpaConfig(n_query_points=4))
        assert w_c == pytest.approx(0.5 * np.sqrt(2.0 / 108.0), abs=1e-12)
        assert w_c == pytest.approx(0.068041, abs=1e-6)

    def test_non_integer_channel_rejected(self):
        with pytest.raises(InvalidArgumentError):
            IpaConfig(c=1 / 3)

    def test_heads_exceeding_width_rejected(self):
        with pytest.raises(InvalidArgumentError):
            IpaConfig(n_head=8, c=16, width=64)


class TestTokenSet:
    def test_length_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(InvalidArgumentError):
            TokenSet([random_pose(rng)], [], ["agent"])

    def test_action_before_observation_rejected(self):
        rng = np.random.default_rng(0)
        poses = [random_pose(rng), random_pose(rng)]
        with pytest.raises(InvalidArgumentError):
            TokenSet(poses, [None, np.zeros(2)], ["action", "agent"])

    def test_anchor_is_latest_agent_token(self):
        rng = np.random.default_rng(1)
        poses = [random_pose(rng) for _ in range(4)]
        feats = [np.zeros(2)] * 3 + [None]
        ts = TokenSet(poses, feats, ["object", "agent", "object", "action"])
        assert ts.anchor_index() == 1
        ts2 = TokenSet(poses, feats, ["object"] * 3 + ["action"])
        assert ts2.anchor_index() == 0


class TestAdaptationNormalize:
    def test_pose_equal_to_anchor_maps_to_identity(self):
        rng = np.random.default_rng(2)
        anchor = random_pose(rng)
        ts = TokenSet([anchor], [np.zeros(2)], ["agent"])
        out = adaptation_normalize(ts, anchor, 10.0)
        assert np.allclose(out.poses[0].r.m, np.eye(3), atol=1e-12)
        assert np.allclose(out.poses[0].p, 0.0, atol=1e-12)

    def test_small_scale_sends_translations_to_zero(self):
        rng = np.random.default_rng(3)
        ts = TokenSet([random_pose(rng)], [np.zeros(2)], ["agent"])
        out = adaptation_normalize(ts, lie.identity_pose(), 1e-12)
        assert np.all(np.abs(out.poses[0].p) < 1e-11)

    def test_translations_bounded_by_one(self):
        rng = np.random.default_rng(4)
        ts = TokenSet([random_pose(rng, trans_scale=3.0) for _ in range(5)],
                      [np.zeros(2)] * 5, ["agent"] + ["object"] * 4)
        out = adaptation_normalize(ts, random_pose(rng), 1.0)
        for p in out.poses:
            assert np.all(np.abs(p.p) < 1.0)
        # large scale saturates to the closed interval boundary in float64
        far = TokenSet([random_pose(rng, trans_scale=50.0)], [np.zeros(2)], ["agent"])
        out = adaptation_normalize(far, lie.identity_pose(), 10.0)
        assert np.all(np.abs(out.poses[0].p) <= 1.0)

    def test_rotations_pass_through_in_anchor_frame(self):
        rng = np.random.default_rng(5)
        anchor = random_pose(rng)
        pose = random_pose(rng)
        ts = TokenSet([pose], [np.zeros(2)], ["agent"])
        out = adaptation_normalize(ts, anchor, 1.0)
        assert np.allclose(out.poses[0].r.m, anchor.r.m.T @ pose.r.m, atol=1e-12)

    def test_nonpositive_scale_rejected(self):
        rng = np.random.default_rng(6)
        ts = TokenSet([random_pose(rng)], [np.zeros(2)], ["agent"])
        with pytest.raises(InvalidArgumentError):
            adaptation_normalize(ts, lie.identity_pose(), 0.0)


def brute_force_ipa(layer, feats, poses):
    """Scalar, loop-based recomputation of one attention update."""
    cfg = layer.config
    H, C, Pq, Pv = cfg.n_head, cfg.c, cfg.n_query_points, cfg.n_point_values
    n = len(poses)
    w_l, w_c = layer.w_l, layer.w_c

    def lin(linear, x):
        return x @ linear.weight.value.T + linear.bias.value

    q = lin(layer.lq, feats).reshape(n, H, C)
    k = lin(layer.lk, feats).reshape(n, H, C)
    v = lin(layer.lv, feats).reshape(n, H, C)
    qp = lin(layer.lpq, feats).reshape(n, H, Pq, 3)
    kp = lin(layer.lpk, feats).reshape(n, H, Pq, 3)
    vp = lin(layer.lpv, feats).reshape(n, H, Pv, 3)

    updates = np.zeros((n, H, C + 4 * Pv))
    for i in range(n):
        ri, pi = poses[i].r.m, poses[i].p
        for h in range(H):
            logits = np.zeros(n)
            for j in range(n):
                rj, pj = poses[j].r.m, poses[j].p
                d2 = 0.0
                for p in range(Pq):
                    gq = ri @ qp[i, h, p] + pi
                    gk = rj @ kp[j, h, p] + pj
                    d2 += np.sum((gq - gk) ** 2)
                logits[j] = w_l * (q[i, h] @ k[j, h]) - w_c * d2
            a = np.exp(logits - logits.max())
            a /= a.sum()
            o = sum(a[j] * v[j, h] for j in range(n))
            og = np.zeros((Pv, 3))
            for j in range(n):
                rj, pj = poses[j].r.m, poses[j].p
                for p in range(Pv):
                    og[p] += a[j] * (rj @ vp[j, h, p] + pj)
            local = (og - pi) @ ri  # r_i^T applied to each global point
            norms = np.sqrt(np.sum(local**2, axis=-1) + 1e-12)
            updates[i, h] = np.concatenate([o, local.reshape(-1), norms])

    # heads interleave as [H, C] then [H, Pv*3] then [H, Pv] blocks
    o_all = updates[:, :, :C].reshape(n, H * C)
    l_all = updates[:, :, C : C + 3 * Pv].reshape(n, H * Pv * 3)
    n_all = updates[:, :, C + 3 * Pv :].reshape(n, H * Pv)
    merged = lin(layer.out, np.concatenate([o_all, l_all, n_all], axis=-1))
    x = feats + merged
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + layer.ln.eps) * layer.ln.gain.value + layer.ln.bias.value


class TestIpaLayer:
    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        cfg = IpaConfig(n_head=2, c=4, n_query_points=2, n_point_values=3, n_ipa_layers=1, width=8)
        layer = IpaLayer(cfg, rng)
        for trial in range(5):
            n = int(rng.integers(1, 5))
            feats = rng.standard_normal((n, cfg.width))
            poses = [random_pose(rng) for _ in range(n)]
            got = ipa_layer_forward(feats, poses, cfg, layer)
            want = brute_force_ipa(layer, feats, poses)
            assert np.max(np.abs(got - want)) < 1e-10

    def test_single_token_invariant_to_global_transform(self):
        rng = np.random.default_rng(8)
        cfg = IpaConfig(n_head=2, c=4, n_query_points=2, n_point_values=2, n_ipa_layers=1, width=8)
        layer = IpaLayer(cfg, rng)
        feats = rng.standard_normal((1, cfg.width))
        pose = random_pose(rng)
        base = ipa_layer_forward(feats, [pose], cfg, layer)
        for _ in range(10):
            delta = random_pose(rng, trans_scale=5.0)
            moved = ipa_layer_forward(feats, [lie.pose_compose(delta, pose)], cfg, layer)
            assert np.max(np.abs(moved - base)) < 1e-9

    def test_point_distance_term_shifts_logits_analytically(self):
        # two tokens at identity rotation separated along x: doubling the
        # separation changes each squared point distance by the analytic amount
        rng = np.random.default_rng(9)
        cfg = IpaConfig(n_head=1, c=4, n_query_points=2, n_point_values=2, n_ipa_layers=1, width=8)
        layer = IpaLayer(cfg, rng)
        feats = rng.standard_normal((2, cfg.width))

        def logits_between(d):
            poses = [lie.identity_pose(), Pose(Rotation(np.eye(3)), np.array([d, 0.0, 0.0]))]
            ipa_layer_forward(feats, poses, cfg, layer)
            attn = layer.last_attention[0]  # [n, n, H]
            return attn

        def lin(linear, x):
            return x @ linear.weight.value.T + linear.bias.value

        qp = lin(layer.lpq, feats).reshape(2, 1, cfg.n_query_points, 3)
        kp = lin(layer.lpk, feats).reshape(2, 1, cfg.n_query_points, 3)
        q = lin(layer.lq, feats).reshape(2, 1, cfg.c)
        k = lin(layer.lk, feats).reshape(2, 1, cfg.c)

        for d in (0.7, 1.4):
            attn = logits_between(d)
            off = np.array([d, 0.0, 0.0])
            raw = np.zeros((2, 2))
            pos = [np.zeros(3), off]
            for i in range(2):
                for j in range(2):
                    d2 = sum(
                        np.sum((qp[i, 0, p] + pos[i] - kp[j, 0, p] - pos[j]) ** 2)
                        for p in range(cfg.n_query_points)
                    )
                    raw[i, j] = layer.w_l * (q[i, 0] @ k[j, 0]) - layer.w_c * d2
            want = np.exp(raw - raw.max(axis=1, keepdims=True))
            want /= want.sum(axis=1, keepdims=True)
            assert np.max(np.abs(attn[:, :, 0] - want)) < 1e-12

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        cfg = IpaConfig(n_head=2, c=4, n_query_points=2, n_point_values=2, n_ipa_layers=1, width=8)
        layer = IpaLayer(cfg, rng)
        feats = rng.standard_normal((4, cfg.width))
        poses = [random_pose(rng) for _ in range(4)]
        ipa_layer_forward(feats, poses, cfg, layer)
        sums = layer.last_attention.sum(axis=2)
        assert np.max(np.abs(sums - 1.0)) < 1e-12

    def test_random_tokens_invariant_under_global_transform(self):
        rng = np.random.default_rng(11)
        cfg = IpaConfig(n_head=2, c=4, n_query_points=2, n_point_values=2, n_ipa_layers=1, width=8)
        layer = IpaLayer(cfg, rng)
        feats = rng.standard_normal((5, cfg.width))
        poses = [random_pose(rng) for _ in range(5)]
        base = ipa_layer_forward(feats, poses, cfg, layer)
        for _ in range(20):
            delta = random_pose(rng, trans_scale=5.0)
            moved = [lie.pose_compose(delta, p) for p in poses]
            out = ipa_layer_forward(feats, moved, cfg, layer)
            assert np.max(np.abs(out - base)) < 1e-6


def small_model(rng, n_act=2, adaptation_scale=1.0):
    cfg = IpaConfig(n_head=2, c=4, n_query_points=2, n_point_values=2, n_ipa_layers=2, width=16)
    return cfg, InvariantTransformer(cfg, obs_feat_dim=2, n_action_tokens=n_act, rng=rng,
                                     adaptation_scale=adaptation_scale)


class TestInvariantTransformer:
    def test_zero_head_outputs_zero(self):
        rng = np.random.default_rng(12)
        cfg, model = small_model(rng)
        ts = random_token_set(rng, 3, 2)
        out = invariant_transformer_forward(ts, 0.4, cfg, model)
        assert out.shape == (2, 6)
        assert np.all(out == 0.0)

    def test_invariance_with_random_head(self):
        rng = np.random.default_rng(13)
        cfg, model = small_model(rng)
        model.head.weight.value[:] = rng.standard_normal(model.head.weight.value.shape)
        ts = random_token_set(rng, 3, 2)
        base = invariant_transformer_forward(ts, 0.3, cfg, model)
        for _ in range(20):
            delta = random_pose(rng, trans_scale=5.0)
            out = invariant_transformer_forward(transform_token_set(ts, delta), 0.3, cfg, model)
            assert np.max(np.abs(out - base)) < 1e-6

    def test_object_permutation_leaves_actions_unchanged(self):
        # permuting the non-anchor observation tokens must not move outputs
        rng = np.random.default_rng(14)
        cfg, model = small_model(rng)
        model.head.weight.value[:] = rng.standard_normal(model.head.weight.value.shape)
        poses = [random_pose(rng) for _ in range(5)]
        feats = [rng.standard_normal(2) for _ in range(3)] + [None, None]
        ts = TokenSet(poses, feats, ["agent", "object", "object", "action", "action"])
        base = invariant_transformer_forward(ts, 0.5, cfg, model)
        swapped = TokenSet(
            [poses[0], poses[2], poses[1], poses[3], poses[4]],
            [feats[0], feats[2], feats[1], None, None],
            ["agent", "object", "object", "action", "action"],
        )
        out = invariant_transformer_forward(swapped, 0.5, cfg, model)
        assert np.max(np.abs(out - base)) < 1e-9

    def test_no_action_tokens_rejected(self):
        rng = np.random.default_rng(15)
        cfg, model = small_model(rng)
        ts = TokenSet([random_pose(rng)], [np.zeros(2)], ["agent"])
        with pytest.raises(InvalidArgumentError):
            invariant_transformer_forward(ts, 0.1, cfg, model)

    def test_t_outside_unit_interval_rejected(self):
        rng = np.random.default_rng(16)
        cfg, model = small_model(rng)
        ts = random_token_set(rng, 2, 1)
        with pytest.raises(InvalidArgumentError):
            invariant_transformer_forward(ts, 1.5, cfg, model)

    def test_time_conditioning_changes_output(self):
        rng = np.random.default_rng(17)
        cfg, model = small_model(rng)
        model.head.weight.value[:] = rng.standard_normal(model.head.weight.value.shape)
        ts = random_token_set(rng, 2, 2)
        a = invariant_transformer_forward(ts, 0.0, cfg, model)
        b = invariant_transformer_forward(ts, 1.0, cfg, model)
        assert np.max(np.abs(a - b)) > 1e-8

    def test_parameter_names_unique(self):
        rng = np.random.default_rng(18)
        _, model = small_model(rng)
        names = [p.name for p in model.parameters()]
        assert len(names) == len(set(names))
