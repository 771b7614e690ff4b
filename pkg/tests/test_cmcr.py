import numpy as np
import pytest

from crclip import tensor as T
from crclip.cmcr import CmcrBranch, CmcrParams, refine, refine_branch, route
from crclip.errors import ConfigurationError, InputError
from crclip.gradcheck import check
from crclip.nn import parameters
from crclip.tensor import Tensor

D_V, D_T = 6, 5


def ln(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@pytest.fixture
def params(rng):
    return CmcrParams.init(rng, D_V, D_T, attn_dim=8, heads=2, dropout_rate=0.1)


@pytest.fixture
def feats(rng):
    return Tensor(rng.normal(size=(4, D_V))), Tensor(rng.normal(size=(4, D_T)))


def zero_weights(p: CmcrParams) -> None:
    for branch in (p.text_query, p.vision_query):
        for t in parameters(branch.attn) + parameters(branch.ffn):
            t.data[:] = 0.0


class TestShapes:
    def test_refined_widths_mirror_inputs(self, params, feats):
        f_v_r, f_t_r = refine(*feats, params)
        assert f_v_r.shape == (4, D_T) and f_t_r.shape == (4, D_V)

    def test_default_attention_hyperparameters(self, rng):
        p = CmcrParams.init(rng, 8, 8)
        assert p.text_query.attn.attn_dim == 512 and p.text_query.attn.heads == 8
        assert p.vision_query.attn.dropout_rate == 0.1

    def test_batch_mismatch(self, params, rng):
        with pytest.raises(InputError):
            refine(Tensor(rng.normal(size=(3, D_V))), Tensor(rng.normal(size=(4, D_T))), params)

    def test_branch_output_must_match_query(self, rng):
        b = CmcrBranch.init(rng, 4, 3, attn_dim=4, heads=2)
        b.attn.w_o = Tensor(np.zeros((4, 5)))
        with pytest.raises(ConfigurationError):
            CmcrBranch(b.attn, b.ln1_gain, b.ln1_bias, b.ffn, b.ln2_gain, b.ln2_bias)


class TestStructure:
    def test_zero_weight_collapse(self, params, feats):
        zero_weights(params)
        f_v, f_t = feats
        f_v_r, f_t_r = refine(f_v, f_t, params)
        # exact: x + 0 is x, so the layers reduce to two LayerNorms of the query input
        one = Tensor(np.ones(D_T)), Tensor(np.zeros(D_T))
        ref_v = T.layer_norm(T.layer_norm(f_t, *one), *one).data
        assert np.array_equal(f_v_r.data, ref_v)
        one = Tensor(np.ones(D_V)), Tensor(np.zeros(D_V))
        assert np.array_equal(f_t_r.data, T.layer_norm(T.layer_norm(f_v, *one), *one).data)
        assert np.allclose(f_v_r.data, ln(ln(f_t.data)), atol=1e-12)

    def test_residual_adds_the_query(self, params, feats):
        # with the FFN off, branch A is LN(LN(F_t + MHA(F_t, F_v)))
        for t in parameters(params.text_query.ffn):
            t.data[:] = 0.0
        f_v, f_t = feats
        a = params.text_query.attn
        attended = (f_v.data @ a.w_v.data) @ a.w_o.data
        got = refine(f_v, f_t, params)[0].data
        assert np.allclose(got, ln(ln(f_t.data + attended)), atol=1e-12)

    def test_branch_swap_symmetry(self, params, rng):
        f_v, f_t = Tensor(rng.normal(size=(1, D_V))), Tensor(rng.normal(size=(1, D_T)))
        a_v, a_t = refine(f_v, f_t, params)
        b_v, b_t = refine(f_t, f_v, params.swapped())
        assert np.array_equal(a_v.data, b_t.data) and np.array_equal(a_t.data, b_v.data)

    def test_batch_permutation_equivariance(self, params, feats, rng):
        f_v, f_t = feats
        perm = rng.permutation(4)
        a_v, a_t = refine(f_v, f_t, params)
        b_v, b_t = refine(Tensor(f_v.data[perm]), Tensor(f_t.data[perm]), params)
        assert np.array_equal(a_v.data[perm], b_v.data)
        assert np.array_equal(a_t.data[perm], b_t.data)

    def test_eval_mode_deterministic(self, params, feats):
        a = refine(*feats, params)
        b = refine(*feats, params)
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))

    def test_training_mode_uses_dropout(self, params, feats):
        a = refine(*feats, params, training=True, rng=np.random.default_rng(0))[0].data
        b = refine(*feats, params)[0].data
        assert not np.array_equal(a, b)


class TestRouting:
    def test_default(self, feats):
        a, b = feats
        assert route(a, b) == (a, b)

    def test_swapped(self, feats):
        a, b = feats
        x, y = route(a, b, "swapped")
        assert x is b and y is a

    def test_unknown(self, feats):
        with pytest.raises(ConfigurationError):
            route(*feats, "sideways")


def test_gradients_wrt_every_parameter(params, feats, rng):
    f_v, f_t = feats
    w_v, w_t = Tensor(rng.normal(size=(4, D_T))), Tensor(rng.normal(size=(4, D_V)))

    def f():
        a, b = refine(f_v, f_t, params)
        return T.add(T.sum(T.mul(a, w_v)), T.sum(T.mul(b, w_t)))

    assert check(f, [f_v, f_t, *parameters(params)]) < 1e-4


def test_refine_branch_matches_refine(params, feats):
    f_v, f_t = feats
    assert np.array_equal(refine_branch(f_t, f_v, params.text_query).data,
                          refine(f_v, f_t, params)[0].data)
