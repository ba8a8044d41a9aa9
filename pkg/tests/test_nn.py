import numpy as np
import pytest

from se3flow import autodiff as ad
from se3flow.autodiff import InferenceContext, Tape, Tensor, grad_check
from se3flow.exceptions import InvalidArgumentError
from se3flow.nn import EncoderBlock, Linear, MultiHeadAttention, TimeEmbedding


def rng():
    return np.random.default_rng(0)


class TestLinear:
    def test_identity_weight(self):
        lin = Linear(3, 3, rng(), "l")
        lin.weight.value = np.eye(3)
        x = np.array([[1.0, 2.0, 3.0]])
        assert np.allclose(lin(InferenceContext(), Tensor(x)).data, x)

    def test_zero_weight_broadcasts_bias(self):
        lin = Linear(3, 2, rng(), "l", zero_init=True)
        lin.bias.value = np.array([5.0, -1.0])
        out = lin(InferenceContext(), Tensor(np.ones((4, 3))))
        assert np.allclose(out.data, [5.0, -1.0])

    def test_gradient(self):
        r = rng()
        lin = Linear(4, 3, r, "l")
        x = r.uniform(-2, 2, size=(5, 4))
        rep = grad_check(
            lambda t: ad.reduce(ad.square(lin(t, Tensor(x))), "sum"),
            lin.parameters(), tol=1e-5,
        )
        assert rep.passed


class TestMha:
    def test_single_token_is_value_projection(self):
        r = rng()
        mha = MultiHeadAttention(8, 2, r, "m")
        x = r.uniform(-1, 1, size=(1, 8))
        out = mha(InferenceContext(), Tensor(x)).data
        v = mha.wv(InferenceContext(), Tensor(x))
        expected = mha.wo(InferenceContext(), v).data
        assert np.allclose(out, expected, atol=1e-12)

    def test_identical_tokens_identical_outputs(self):
        r = rng()
        mha = MultiHeadAttention(8, 2, r, "m")
        row = r.uniform(-1, 1, size=8)
        out = mha(InferenceContext(), Tensor(np.stack([row, row]))).data
        assert np.allclose(out[0], out[1], atol=1e-12)

    def test_head_count_must_divide_width(self):
        with pytest.raises(InvalidArgumentError):
            MultiHeadAttention(10, 3, rng())


class TestEncoderBlock:
    def test_zero_projections_identity(self):
        r = rng()
        enc = EncoderBlock(8, 2, r, name="e")
        enc.mha.wo.weight.value[:] = 0.0
        enc.mha.wo.bias.value[:] = 0.0
        enc.ff2.weight.value[:] = 0.0
        enc.ff2.bias.value[:] = 0.0
        x = r.uniform(-1, 1, size=(3, 8))
        assert np.allclose(enc(InferenceContext(), Tensor(x)).data, x, atol=1e-12)

    def test_permutation_equivariance(self):
        r = rng()
        enc = EncoderBlock(8, 2, r, name="e")
        x = r.uniform(-1, 1, size=(5, 8))
        perm = r.permutation(5)
        a = enc(InferenceContext(), Tensor(x)).data[perm]
        b = enc(InferenceContext(), Tensor(x[perm])).data
        assert np.abs(a - b).max() < 1e-12

    def test_gradient(self):
        r = rng()
        enc = EncoderBlock(8, 2, r, name="e")
        x = r.uniform(-1, 1, size=(3, 8))
        rep = grad_check(
            lambda t: ad.reduce(ad.square(enc(t, Tensor(x))), "sum"),
            enc.parameters(), tol=1e-4, probes_per_param=20,
        )
        assert rep.passed


class TestTimeEmbedding:
    def test_deterministic(self):
        te = TimeEmbedding(8, 8, rng())
        a = te(InferenceContext(), 0.3).data
        b = te(InferenceContext(), 0.3).data
        assert a.tobytes() == b.tobytes()

    def test_endpoints_distinct(self):
        te = TimeEmbedding(16, 16, rng())
        e0 = te(InferenceContext(), 0.0).data
        e1 = te(InferenceContext(), 1.0).data
        cos = e0 @ e1 / (np.linalg.norm(e0) * np.linalg.norm(e1))
        assert 1.0 - cos > 0.1

    def test_smooth(self):
        te = TimeEmbedding(16, 16, rng())
        r = np.random.default_rng(1)
        for _ in range(20):
            t = r.uniform(0, 1 - 1e-4)
            a = te(InferenceContext(), t).data
            b = te(InferenceContext(), t + 1e-4).data
            assert np.linalg.norm(b - a) < 1e-2

    def test_range_checked(self):
        te = TimeEmbedding(8, 8, rng())
        with pytest.raises(InvalidArgumentError):
            te(InferenceContext(), 1.5)

    def test_odd_dim_rejected(self):
        with pytest.raises(InvalidArgumentError):
            TimeEmbedding(7, 8, rng())
