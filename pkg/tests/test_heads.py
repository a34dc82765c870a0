import numpy as np
import pytest

from sgapgaze import autodiff as ad
from sgapgaze.autodiff import DimensionError, Tensor
from sgapgaze.heads import (
    attend_scene,
    attention_logits,
    encode_eye_embedding,
    encode_face_embedding,
    encode_iris,
    finalize_pog,
    fuse_intent,
    init_heads,
    pog_expectation,
    predict_direction,
    residual_correction,
)
from sgapgaze.streams import grid_centers, scene_tokens

D = 8


@pytest.fixture()
def params():
    return init_heads(np.random.default_rng(0), D)


def rand(*shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def tokens_from(fmap):
    return scene_tokens(Tensor(fmap))


# ---------------------------------------------------------------------------
# embeddings and fusion
# ---------------------------------------------------------------------------

def test_zero_inputs_give_zero_embeddings(params):
    z = encode_face_embedding([Tensor(np.zeros(D))] * 4, params)
    assert z.shape == (D,) and np.all(z.data == 0)
    z = encode_eye_embedding(Tensor(np.zeros(D)), Tensor(np.zeros(D)), params)
    assert np.all(z.data == 0)


def test_layer_norm_property(params):
    for seed in range(5):
        z = encode_face_embedding([rand(D, seed=seed + k) for k in range(4)], params).data
        if np.var(z) > 0:
            assert abs(z.mean()) < 1e-9 and abs(z.var() - 1) < 1e-3


def test_face_needs_four_stages(params):
    with pytest.raises(DimensionError):
        encode_face_embedding([rand(D)] * 3, params)


def test_eye_order_matters(params):
    a, b = rand(D, seed=1), rand(D, seed=2)
    assert not np.allclose(encode_eye_embedding(a, b, params).data, encode_eye_embedding(b, a, params).data)


def test_iris_gate_zero_and_one(params):
    i_c = np.array([0.2, 0.7, 0.3, 0.6])
    assert np.all(encode_iris(i_c, 0.0, params).data == 0)
    z = encode_iris(i_c, 1.0, params).data
    assert np.any(z != 0)
    with pytest.raises(DimensionError):
        encode_iris(np.zeros(3), 1.0, params)


def test_iris_gate_per_row(params):
    i_c = np.random.default_rng(0).uniform(size=(3, 4))
    z = encode_iris(i_c, np.array([1.0, 0.0, 1.0]), params).data
    assert np.all(z[1] == 0) and np.any(z[0] != 0)


def test_closed_gate_gives_positive_zero(params):
    for seed in range(5):
        i_c = np.random.default_rng(seed).uniform(-3, 3, size=(4, 4))
        z = encode_iris(i_c, 0.0, params).data
        assert not np.signbit(z).any()


def test_fusion_order_sensitive(params):
    a, b, c = rand(D, seed=1), rand(D, seed=2), rand(D, seed=3)
    z1 = fuse_intent(a, b, c, params).z_gaze.data
    z2 = fuse_intent(b, a, c, params).z_gaze.data
    assert z1.shape == (D,) and not np.allclose(z1, z2)
    assert fuse_intent(a, b, c, params).z_cat.shape == (3 * D,)
    with pytest.raises(DimensionError):
        fuse_intent(a, b, rand(D + 1), params)


# ---------------------------------------------------------------------------
# direction
# ---------------------------------------------------------------------------

def test_direction_example(params):
    params["dir.w"].data[...] = 0
    params["dir.b"].data[...] = [0, 0, 2]
    np.testing.assert_array_equal(predict_direction(rand(D), params).data, [0, 0, 1])


def test_direction_unit_norm(params):
    g = predict_direction(rand(50, D, seed=4), params).data
    np.testing.assert_allclose(np.linalg.norm(g, axis=-1), 1, atol=1e-12)


# ---------------------------------------------------------------------------
# attention and PoG
# ---------------------------------------------------------------------------

def test_zero_keys_give_uniform_attention(params):
    params["key.w"].data[...] = 0
    alpha = attend_scene(rand(D), tokens_from(np.random.default_rng(0).normal(size=(D, 7, 7))), params).data
    np.testing.assert_allclose(alpha, 1 / 49, rtol=0, atol=1e-15)
    np.testing.assert_allclose(pog_expectation(Tensor(alpha), grid_centers()).data, [0.5, 0.5], atol=1e-15)


def test_peaked_logit_concentrates_attention(params):
    params["key.w"].data[...] = 0
    params["key.w"].data[0, 0] = 1.0
    fmap = np.zeros((D, 7, 7))
    fmap[0, 0, 0] = 20.0
    z = Tensor(np.eye(D)[0])
    tok = tokens_from(fmap)
    logits = attention_logits(z, tok, params).data
    assert logits[0] == 20.0 and np.all(logits[1:] == 0)
    alpha = attend_scene(z, tok, params).data
    assert alpha[0] > 0.999
    assert abs(alpha.sum() - 1) < 1e-12


def test_attention_scaling(params):
    z, tok = rand(D), tokens_from(np.random.default_rng(1).normal(size=(D, 7, 7)))
    a = attention_logits(z, tok, params).data
    b = attention_logits(z, tok, params, "inv_sqrt_d").data
    np.testing.assert_allclose(b, a / np.sqrt(D), rtol=1e-12)
    with pytest.raises(ValueError):
        attention_logits(z, tok, params, "bogus")


def test_expectation_examples():
    c = grid_centers()
    one = np.zeros(49)
    one[0] = 1
    np.testing.assert_allclose(pog_expectation(Tensor(one), c).data, [1 / 14, 1 / 14], atol=1e-15)
    one = np.zeros(49)
    one[48] = 1
    np.testing.assert_allclose(pog_expectation(Tensor(one), c).data, [13 / 14, 13 / 14], atol=1e-15)
    half = np.zeros(49)
    half[0] = half[6] = 0.5
    np.testing.assert_allclose(pog_expectation(Tensor(half), c).data, [0.5, 1 / 14], atol=1e-15)


def test_expectation_in_hull():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a = rng.dirichlet(np.full(49, 0.3))
        p = pog_expectation(Tensor(a), grid_centers()).data
        assert np.all(p >= 1 / 14 - 1e-15) and np.all(p <= 13 / 14 + 1e-15)


def test_expectation_uniform_is_exact_centre():
    for n in (1, 3):
        a = np.full((n, 49), 1 / 49)
        assert np.all(pog_expectation(Tensor(a), grid_centers()).data == 0.5)


def test_expectation_saturated_stays_in_hull():
    # a near-one-hot alpha whose sum rounds above 1
    a = np.full(49, 1e-17)
    a[0] = 1.0
    p = pog_expectation(Tensor(a), grid_centers()).data
    assert np.all(p >= 1 / 14)
    a = Tensor(np.random.default_rng(1).dirichlet(np.ones(49)), requires_grad=True)
    p = pog_expectation(a, grid_centers())
    ad.sum_(p).backward()
    # offsets from the centre; differs from c only along the all-ones direction, which softmax ignores
    np.testing.assert_allclose(a.grad, (grid_centers() - 0.5).sum(1), atol=1e-15)


def test_residual_bounds_and_zero_lambda(params):
    z = rand(100, D, seed=3)
    params["res.w"].data[...] *= 50
    d = residual_correction(z, params).data
    assert np.all(np.abs(d) <= abs(params["res.lam"].item()))
    params["res.lam"].data[...] = 0
    assert np.all(residual_correction(z, params).data == 0)


def test_residual_vertical_only(params):
    d = residual_correction(rand(5, D), params, "vertical").data
    assert np.all(d[:, 0] == 0) and np.any(d[:, 1] != 0)
    with pytest.raises(ValueError):
        residual_correction(rand(D), params, "sideways")


def test_finalize_clamps():
    out = finalize_pog(Tensor(np.array([0.95, 0.02])), Tensor(np.array([0.1, -0.05]))).data
    np.testing.assert_array_equal(out, [1.0, 0.0])
    out = finalize_pog(Tensor(np.array([0.4, 0.6])), Tensor(np.array([0.05, -0.05]))).data
    np.testing.assert_allclose(out, [0.45, 0.55], atol=1e-15)


def test_head_gradients(params):
    """Finite differences through fusion, attention, expectation and residual."""
    for p in params.values():
        p.data[...] += np.random.default_rng(9).normal(size=p.shape) * 0.05
    feats = [rand(D, seed=10 + k) for k in range(4)]
    el, er = rand(D, seed=20), rand(D, seed=21)
    tok = tokens_from(np.random.default_rng(22).normal(size=(D, 7, 7)))
    r = Tensor(np.array([0.7, -1.3]))
    rd = Tensor(np.array([0.2, 0.5, -0.4]))

    def f():
        it = fuse_intent(encode_face_embedding(feats, params), encode_eye_embedding(el, er, params),
                         encode_iris(np.array([0.3, 0.4, 0.35, 0.45]), 1.0, params), params)
        p = ad.add(pog_expectation(attend_scene(it.z_gaze, tok, params), tok.centers), residual_correction(it.z_gaze, params))
        return ad.add(ad.sum_(ad.mul(p, r)), ad.sum_(ad.mul(predict_direction(it.z_gaze, params), rd)))

    with ad.no_grad(), ad.kink_margin() as m:
        f()
    assert m[0] > 1e-5
    worst = max(ad.finite_diff_check(f, p, h=1e-7) for p in params.values())
    assert worst <= 1e-5
