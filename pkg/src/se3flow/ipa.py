"""Invariant Point Attention and the SE(3) invariant transformer.

Attention compatibility mixes a scaled scalar dot product with squared
distances between points placed in each token's global frame, which makes
the per-token feature update invariant to global rigid transforms. The
point-distance and point-output terms include the token translations so
that invariance covers translations, not just rotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .exceptions import InvalidArgumentError, ShapeError
from .lie import Pose, Rotation, check_rotation
from .nn import EncoderBlock, LayerNorm, Linear, TimeEmbedding


@dataclass(frozen=True)
class IpaConfig:
    n_head: int = 4
    c: int = 16
    n_query_points: int = 4
    n_point_values: int = 8
    n_ipa_layers: int = 4
    width: int = 64

    def __post_init__(self):
        for name in ("n_head", "c", "n_query_points", "n_point_values", "n_ipa_layers", "width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer, got {v!r}")
        if self.c * self.n_head > self.width:
            raise InvalidArgumentError("c * n_head must not exceed model width")


def ipa_constants(config: IpaConfig) -> tuple[float, float]:
    """Attention regularization weights: scalar term and point term."""
    w_l = 1.0 / np.sqrt(3.0 * config.c)
    w_c = 0.5 * np.sqrt(2.0 / ((3.0 * 9.0) * config.n_query_points))
    return float(w_l), float(w_c)


@dataclass
class TokenSet:
    """Poses, per-token features, and kind flags for one scene.

    Observation tokens carry raw feature vectors; action tokens get their
    features from learnable parameters inside the model (feature entry may
    be None). Observation tokens must precede action tokens.
    """

    poses: list[Pose]
    features: list
    kinds: list[str]

    def __post_init__(self):
        if not (len(self.poses) == len(self.features) == len(self.kinds)):
            raise InvalidArgumentError("poses, features, and kinds must have equal length")
        seen_action = False
        for k in self.kinds:
            if k == "action":
                seen_action = True
            elif seen_action:
                raise InvalidArgumentError("observation tokens must precede action tokens")

    @property
    def n_actions(self) -> int:
        return sum(1 for k in self.kinds if k == "action")

    @property
    def n_obs(self) -> int:
        return len(self.kinds) - self.n_actions

    def obs_feature_matrix(self) -> np.ndarray:
        feats = [np.asarray(f, dtype=np.float64) for f in self.features[: self.n_obs]]
        return np.stack(feats) if feats else np.zeros((0, 0))

    def rotation_array(self) -> np.ndarray:
        return np.stack([p.r.m for p in self.poses])

    def translation_array(self) -> np.ndarray:
        return np.stack([p.p for p in self.poses])

    def anchor_index(self) -> int:
        """Most recent agent/end-effector observation token, else token 0."""
        idx = 0
        for i in range(self.n_obs):
            if self.kinds[i] == "agent":
                idx = i
        return idx


def adaptation_normalize(tokens: TokenSet, anchor: Pose, scale: float) -> TokenSet:
    """Re-express poses in the anchor frame and squash translations.

    Each pose is left-multiplied by anchor^-1, then every translation
    component is mapped through tanh(scale * component); rotations pass
    through untouched.
    """
    if scale <= 0.0:
        raise InvalidArgumentError(f"scale must be positive, got {scale}")
    check_rotation(anchor.r.m)
    a_rt = anchor.r.m.T
    new_poses = []
    for pose in tokens.poses:
        r = Rotation(a_rt @ pose.r.m)
        p = np.tanh(scale * (a_rt @ (pose.p - anchor.p)))
        new_poses.append(Pose(r, p))
    return TokenSet(new_poses, list(tokens.features), list(tokens.kinds))


def _adapt_arrays(rot, trans, anchor_rot, anchor_trans, scale):
    """Batched adaptation on raw arrays: rot [B,n,3,3], trans [B,n,3]."""
    a_rt = anchor_rot.swapaxes(-1, -2)  # [B,3,3]
    rot_n = np.einsum("bij,bnjk->bnik", a_rt, rot)
    trans_n = np.einsum("bij,bnj->bni", a_rt, trans - anchor_trans[:, None, :])
    return rot_n, np.tanh(scale * trans_n)


class IpaLayer:
    """One invariant point attention update with residual + layernorm."""

    def __init__(self, config: IpaConfig, rng, name="ipa"):
        W, H, C = config.width, config.n_head, config.c
        Pq, Pv = config.n_query_points, config.n_point_values
        self.config = config
        self.w_l, self.w_c = ipa_constants(config)
        self.lq = Linear(W, H * C, rng, f"{name}.q")
        self.lk = Linear(W, H * C, rng, f"{name}.k")
        self.lv = Linear(W, H * C, rng, f"{name}.v")
        self.lpq = Linear(W, H * Pq * 3, rng, f"{name}.pq")
        self.lpk = Linear(W, H * Pq * 3, rng, f"{name}.pk")
        self.lpv = Linear(W, H * Pv * 3, rng, f"{name}.pv")
        self.out = Linear(H * (C + 4 * Pv), W, rng, f"{name}.out")
        self.ln = LayerNorm(W, f"{name}.ln")
        self.last_attention: np.ndarray | None = None

    def __call__(self, tape, feats: Tensor, rot: np.ndarray, trans: np.ndarray) -> Tensor:
        cfg = self.config
        B, n, W = feats.shape
        H, C, Pq, Pv = cfg.n_head, cfg.c, cfg.n_query_points, cfg.n_point_values

        q = ad.transpose(ad.reshape(self.lq(tape, feats), (B, n, H, C)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(self.lk(tape, feats), (B, n, H, C)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(self.lv(tape, feats), (B, n, H, C)), (0, 2, 1, 3))
        scal = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))  # [B,H,n,n]

        rot_t = Tensor(rot.swapaxes(-1, -2))  # [B,n,3,3]; x_row @ r^T rotates to world
        p_off = Tensor(trans[:, :, None, :])  # [B,n,1,3]

        qp = ad.reshape(self.lpq(tape, feats), (B, n, H * Pq, 3))
        kp = ad.reshape(self.lpk(tape, feats), (B, n, H * Pq, 3))
        gq = ad.add(ad.matmul(qp, rot_t), p_off)
        gk = ad.add(ad.matmul(kp, rot_t), p_off)
        diff = ad.sub(
            ad.reshape(gq, (B, n, 1, H * Pq, 3)), ad.reshape(gk, (B, 1, n, H * Pq, 3))
        )
        d2 = ad.reduce(ad.square(diff), "sum", axis=-1)  # [B,n,n,H*Pq]
        d2h = ad.reduce(ad.reshape(d2, (B, n, n, H, Pq)), "sum", axis=-1)  # [B,n,n,H]

        logits = ad.sub(
            ad.scale(ad.transpose(scal, (0, 2, 3, 1)), self.w_l), ad.scale(d2h, self.w_c)
        )
        attn = ad.softmax(logits, axis=2)  # over keys j
        self.last_attention = attn.data
        attn_h = ad.transpose(attn, (0, 3, 1, 2))  # [B,H,n,n]

        o = ad.matmul(attn_h, v)  # [B,H,n,C]
        o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (B, n, H * C))

        vp = ad.reshape(self.lpv(tape, feats), (B, n, H * Pv, 3))
        gv = ad.add(ad.matmul(vp, rot_t), p_off)  # [B,n,H*Pv,3]
        gv_h = ad.transpose(ad.reshape(gv, (B, n, H, Pv * 3)), (0, 2, 1, 3))
        og = ad.matmul(attn_h, gv_h)  # [B,H,n,Pv*3]
        og = ad.reshape(ad.transpose(og, (0, 2, 1, 3)), (B, n, H * Pv, 3))
        local = ad.matmul(ad.sub(og, p_off), Tensor(rot))  # back into token frames
        norms = ad.sqrt(ad.add(ad.reduce(ad.square(local), "sum", axis=-1), Tensor(1e-12)))

        update = self.out(
            tape,
            ad.concat([o, ad.reshape(local, (B, n, H * Pv * 3)), norms], axis=-1),
        )
        return self.ln(tape, ad.add(feats, update))

    def parameters(self):
        params = []
        for lin in (self.lq, self.lk, self.lv, self.lpq, self.lpk, self.lpv, self.out):
            params.extend(lin.parameters())
        params.extend(self.ln.parameters())
        return params


class InvariantTransformer:
    """Full vector-field network: observation encoder, learnable action
    features, time conditioning, stacked (IPA -> encoder) layers, and a
    zero-initialized 6-vector head per action token."""

    def __init__(
        self,
        config: IpaConfig,
        obs_feat_dim: int,
        n_action_tokens: int,
        rng,
        adaptation_scale: float = 10.0,
        aux_dim: int = 0,
        anchor_index: int | None = None,
    ):
        if n_action_tokens < 1:
            raise InvalidArgumentError("need at least one action token")
        if adaptation_scale <= 0.0:
            raise InvalidArgumentError("adaptation scale must be positive")
        W = config.width
        self.config = config
        self.obs_feat_dim = obs_feat_dim
        self.n_action_tokens = n_action_tokens
        self.adaptation_scale = adaptation_scale
        self.aux_dim = aux_dim
        self.anchor_index = anchor_index
        self.obs_encoder = Linear(obs_feat_dim, W, rng, "obs_encoder") if obs_feat_dim else None
        bound = 1.0 / np.sqrt(W)
        self.action_feats = Parameter(
            rng.uniform(-bound, bound, size=(n_action_tokens, W)), "action_feats"
        )
        self.aux_proj = Linear(aux_dim, W, rng, "aux_proj") if aux_dim else None
        self.time_embed = TimeEmbedding(W if W % 2 == 0 else W + 1, W, rng)
        self.layers = [
            (IpaLayer(config, rng, f"layer{i}.ipa"), EncoderBlock(W, config.n_head, rng, name=f"layer{i}.enc"))
            for i in range(config.n_ipa_layers)
        ]
        self.head = Linear(W, 6, rng, "head", zero_init=True)

    def parameters(self) -> list[Parameter]:
        params = []
        if self.obs_encoder is not None:
            params.extend(self.obs_encoder.parameters())
        params.append(self.action_feats)
        if self.aux_proj is not None:
            params.extend(self.aux_proj.parameters())
        params.extend(self.time_embed.parameters())
        for ipa_layer, enc in self.layers:
            params.extend(ipa_layer.parameters())
            params.extend(enc.parameters())
        params.extend(self.head.parameters())
        return params

    def forward_arrays(
        self,
        tape,
        rot: np.ndarray,
        trans: np.ndarray,
        obs_feats: np.ndarray | None,
        t,
        anchor_rot: np.ndarray | None = None,
        anchor_trans: np.ndarray | None = None,
        aux: np.ndarray | None = None,
    ) -> Tensor:
        """Batched forward. rot [B,n,3,3], trans [B,n,3] in the world frame
        with action tokens last; returns [B, n_action_tokens, 6]."""
        B, n = rot.shape[0], rot.shape[1]
        N = self.n_action_tokens
        W = self.config.width
        if anchor_rot is None:
            anchor_rot = np.broadcast_to(np.eye(3), (B, 3, 3))
            anchor_trans = np.zeros((B, 3))
        rot_n, trans_n = _adapt_arrays(rot, trans, anchor_rot, anchor_trans, self.adaptation_scale)

        af = tape.watch(self.action_feats)
        f_act = ad.add(ad.reshape(af, (1, N, W)), Tensor(np.zeros((B, 1, 1))))
        if self.aux_proj is not None:
            if aux is None:
                raise InvalidArgumentError("model expects auxiliary action inputs")
            f_act = ad.add(f_act, self.aux_proj(tape, Tensor(aux)))
        if obs_feats is not None and obs_feats.shape[1] > 0:
            if self.obs_encoder is None:
                raise InvalidArgumentError("model was built without an observation encoder")
            f = ad.concat([self.obs_encoder(tape, Tensor(obs_feats)), f_act], axis=1)
        else:
            f = f_act
        if f.shape[1] != n:
            raise ShapeError(
                f"token count mismatch: {n} poses but {f.shape[1]} feature rows"
            )
        t_vec = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (B,))
        temb = self.time_embed(tape, t_vec)
        f = ad.add(f, ad.reshape(temb, (B, 1, W)))
        for ipa_layer, enc in self.layers:
            f = ipa_layer(tape, f, rot_n, trans_n)
            f = enc(tape, f)
        out = self.head(tape, f)
        return ad.narrow(out, 1, n - N, N)

    def anchor_pose_arrays(self, token_sets: list[TokenSet]):
        idxs = [
            ts.anchor_index() if self.anchor_index is None else self.anchor_index
            for ts in token_sets
        ]
        rot = np.stack([ts.poses[i].r.m for ts, i in zip(token_sets, idxs)])
        trans = np.stack([ts.poses[i].p for ts, i in zip(token_sets, idxs)])
        return rot, trans


def ipa_layer_forward(features, poses, config: IpaConfig, layer: IpaLayer, tape=None):
    """Single-scene IPA update. features: [n, width] array or Tensor;
    poses: list of Pose. Returns a [n, width] array (or Tensor if taped)."""
    for p in poses:
        check_rotation(p.r.m)
    rot = np.stack([p.r.m for p in poses])[None]
    trans = np.stack([p.p for p in poses])[None]
    taped = isinstance(features, Tensor)
    f = features if taped else Tensor(np.asarray(features, dtype=np.float64))
    f3 = ad.reshape(f, (1,) + tuple(f.shape))
    ctx = tape if tape is not None else ad.InferenceContext()
    out = layer(ctx, f3, rot, trans)
    out = ad.reshape(out, tuple(out.shape[1:]))
    return out if taped else out.data


def invariant_transformer_forward(
    tokens: TokenSet, t: float, config: IpaConfig, weights: InvariantTransformer
) -> np.ndarray:
    """Inference forward for one token set; returns [n_actions, 6]."""
    if tokens.n_actions < 1:
        raise InvalidArgumentError("token set contains no action tokens")
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError("t must lie in [0, 1]")
    anchor_rot, anchor_trans = weights.anchor_pose_arrays([tokens])
    obs = tokens.obs_feature_matrix()[None] if tokens.n_obs else None
    out = weights.forward_arrays(
        ad.InferenceContext(),
        tokens.rotation_array()[None],
        tokens.translation_array()[None],
        obs,
        t,
        anchor_rot,
        anchor_trans,
    )
    return out.data[0]
