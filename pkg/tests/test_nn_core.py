import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdalign.autograd import Tensor
from pdalign.errors import DimensionError, ValidityError
from pdalign.nn_core import (ClassifierParams, EncoderParams, OptimizerState, adam_step, backward,
                             classifier_forward, encoder_forward, grad_check, init_classifier,
                             init_encoder, param_hash, softmax)


def zeros_encoder(d_x=3, h=4, d_z=2, **kw):
    return EncoderParams(np.zeros((d_x, h)), np.zeros(h), np.zeros((h, d_z)), np.zeros(d_z), **kw)


# -- forward passes --------------------------------------------------------------

def test_forward_shapes():
    enc = init_encoder(6, 10, 5, seed=0)
    cls = init_classifier(5, 4, 7, seed=1)
    z = encoder_forward(np.ones((3, 6)), enc)
    assert z.shape == (3, 5)
    assert classifier_forward(z, cls).shape == (3, 4)


def test_zero_weights_give_zero_embeddings_and_uniform_softmax():
    z = encoder_forward(np.random.default_rng(0).normal(size=(5, 3)), zeros_encoder())
    assert np.all(z.data == 0)
    cls = ClassifierParams(np.zeros((2, 3)), np.zeros(3), np.zeros((3, 4)), np.zeros(4))
    p = softmax(classifier_forward(z, cls)).data
    np.testing.assert_allclose(p, 0.25, atol=1e-15)


def test_hand_computed_forward():
    # hidden = relu([1, -2] @ I + 0) = [1, 0]; latent = [1, 0] @ [[2], [3]] - 0.5
    enc = EncoderParams(np.eye(2), np.zeros(2), np.array([[2.0], [3.0]]), np.array([-0.5]),
                        latent_activation="linear")
    assert encoder_forward(np.array([[1.0, -2.0]]), enc).data.tolist() == [[1.5]]
    enc_neg = EncoderParams(np.eye(2), np.zeros(2), np.array([[-2.0], [3.0]]), np.array([0.0]))
    assert encoder_forward(np.array([[1.0, -2.0]]), enc_neg).data.tolist() == [[0.0]]
    lin = EncoderParams(np.eye(2), np.zeros(2), np.array([[-2.0], [3.0]]), np.array([0.0]),
                        latent_activation="linear")
    assert encoder_forward(np.array([[1.0, -2.0]]), lin).data.tolist() == [[-2.0]]


def test_eval_forward_is_pure():
    enc = init_encoder(4, 8, 3, dropout=0.5, seed=2)
    x = np.random.default_rng(1).normal(size=(6, 4))
    a = encoder_forward(x, enc).data
    b = encoder_forward(x, enc).data
    assert np.array_equal(a, b)


def test_same_seed_same_init_and_dropout_mask():
    assert param_hash(init_encoder(5, 6, 3, seed=4).parameters()) == \
        param_hash(init_encoder(5, 6, 3, seed=4).parameters())
    assert param_hash(init_encoder(5, 6, 3, seed=4).parameters()) != \
        param_hash(init_encoder(5, 6, 3, seed=5).parameters())
    enc = init_encoder(5, 6, 3, dropout=0.3, seed=0)
    x = np.ones((4, 5))
    a = encoder_forward(x, enc, training=True, rng_seed=9).data
    b = encoder_forward(x, enc, training=True, rng_seed=9).data
    assert np.array_equal(a, b)


@pytest.mark.parametrize("scheme", ["he", "fan_in"])
def test_init_bounds(scheme):
    enc = init_encoder(50, 40, 30, seed=0, scheme=scheme)
    bound = np.sqrt(6 / 50) if scheme == "he" else 1 / np.sqrt(50)
    assert np.abs(enc.w1.data).max() <= bound
    assert np.abs(enc.w1.data).max() > 0.9 * bound
    if scheme == "he":
        assert np.all(enc.b1.data == 0)
    else:
        assert np.abs(enc.b1.data).max() <= bound


def test_inverted_dropout_matches_eval_in_expectation():
    # holds exactly only when nothing nonlinear follows a dropout layer
    enc = init_encoder(3, 5, 4, dropout=0.3, seed=3, latent_activation="linear")
    x = np.random.default_rng(0).normal(size=(1, 3))
    ref = encoder_forward(x, enc).data[0]
    rng = np.random.default_rng(11)
    draws = np.stack([encoder_forward(x, enc, training=True, rng_seed=rng).data[0]
                      for _ in range(10_000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - ref) <= 3 * se + 1e-12)


def test_dropout_zero_training_equals_eval():
    enc = init_encoder(3, 5, 4, dropout=0.0, seed=3)
    x = np.ones((2, 3))
    assert np.array_equal(encoder_forward(x, enc, training=True, rng_seed=0).data,
                          encoder_forward(x, enc).data)


@pytest.mark.parametrize("x", [np.ones((2, 4)), np.ones(3), np.ones((2, 3, 1))])
def test_wrong_input_shape(x):
    with pytest.raises(DimensionError):
        encoder_forward(x, init_encoder(3, 4, 2))


def test_non_finite_input():
    with pytest.raises(ValidityError):
        encoder_forward(np.array([[1.0, np.nan, 0.0]]), init_encoder(3, 4, 2))
    with pytest.raises(ValidityError):
        softmax(np.array([[np.inf, 0.0]]))


@pytest.mark.parametrize("kw", [dict(dropout=1.0), dict(dropout=-0.1),
                                dict(latent_activation="tanh")])
def test_invalid_encoder_settings(kw):
    with pytest.raises(ValueError):
        zeros_encoder(**kw)


def test_mismatched_layer_shapes():
    with pytest.raises(DimensionError):
        EncoderParams(np.zeros((3, 4)), np.zeros(5), np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        ClassifierParams(np.zeros((2, 3)), np.zeros(3), np.zeros((4, 2)), np.zeros(2))


def test_unknown_init_scheme():
    with pytest.raises(ValueError):
        init_encoder(3, 4, 2, scheme="xavier")


# -- softmax -------------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-500, 500))
def test_softmax_is_shift_invariant(seed, c):
    x = np.random.default_rng(seed).normal(scale=20, size=(4, 6))
    p = softmax(x).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax(x + c).data, p, atol=1e-12)


def test_softmax_ce_gradient_is_p_minus_y():
    z = Tensor(np.array([[0.3, -1.0, 2.0], [0.0, 0.5, 0.1]]), requires_grad=True)
    y = np.array([[0, 0, 1.0], [1.0, 0, 0]])
    p = softmax(z)
    (-(p.log() * y).sum(axis=1)).sum().backward()
    np.testing.assert_allclose(z.grad, p.data - y, atol=1e-12)


# -- backward and Adam ---------------------------------------------------------------

def test_backward_zero_fills_unused_params():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    g = backward((a * 3).sum(), {"a": a, "b": b})
    assert g["a"].tolist() == [3.0, 3.0]
    assert g["b"].tolist() == [0.0, 0.0, 0.0]


def test_backward_does_not_accumulate_across_calls():
    a = Tensor(np.ones(2), requires_grad=True)
    backward((a * 3).sum(), {"a": a})
    assert backward((a * 3).sum(), {"a": a})["a"].tolist() == [3.0, 3.0]


def test_adam_first_step_moves_by_lr():
    state = OptimizerState(lr=1e-3)
    new, state = adam_step({"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -4.0])}, state)
    np.testing.assert_allclose(new["w"], [1.0 - 1e-3, 2.0 + 1e-3], atol=1e-10)
    assert state.step == 1


def test_adam_two_steps_by_hand():
    g1, g2, lr = 2.0, -1.0, 0.1
    state = OptimizerState(lr=lr)
    p, state = adam_step({"w": np.array(0.0)}, {"w": np.array(g1)}, state)
    p, state = adam_step(p, {"w": np.array(g2)}, state)
    m = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.999 * (0.001 * g1**2) + 0.001 * g2**2
    step2 = lr * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    step1 = lr * g1 / (abs(g1) + 1e-8)
    assert float(p["w"]) == pytest.approx(-step1 - step2, abs=1e-12)


def test_adam_leaves_inputs_untouched():
    w = np.array([1.0])
    state = OptimizerState()
    adam_step({"w": w}, {"w": np.array([1.0])}, state)
    assert w.tolist() == [1.0] and state.step == 0 and not state.m


def test_adam_shape_errors():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState())
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, OptimizerState())


def test_identical_runs_have_identical_trajectories():
    def run():
        enc = init_encoder(3, 4, 2, seed=0)
        params = enc.parameters()
        state = OptimizerState(lr=0.01)
        x = np.random.default_rng(0).normal(size=(5, 3))
        for i in range(5):
            loss = (encoder_forward(x, enc, training=True, rng_seed=i) ** 2).sum()
            new, state = adam_step({k: p.data for k, p in params.items()},
                                   backward(loss, params), state)
            for k, p in params.items():
                p.data = new[k]
        return param_hash(params)
    assert run() == run()


# -- gradient checker ------------------------------------------------------------------

def test_grad_check_quadratic():
    err = grad_check(lambda p: (p["w"] * p["w"]).sum(), {"w": np.array([3.0])}, 1e-5)
    assert err < 1e-9


def test_grad_check_network():
    rng = np.random.default_rng(0)
    enc = init_encoder(4, 5, 3, dropout=0.0, seed=1)
    cls = init_classifier(3, 3, 4, seed=2)
    x = rng.normal(size=(5, 4))
    y = np.eye(3)[[0, 1, 2, 0, 1]]
    start = {k: v.data + rng.normal(scale=0.3, size=v.shape)
             for k, v in {**enc.parameters(), **cls.parameters()}.items()}

    def ce(p):
        e = EncoderParams(p["enc.w1"], p["enc.b1"], p["enc.w2"], p["enc.b2"], dropout=0.0)
        c = ClassifierParams(p["cls.w1"], p["cls.b1"], p["cls.w2"], p["cls.b2"])
        probs = softmax(classifier_forward(encoder_forward(x, e), c))
        return -(probs.log() * y).sum(axis=1).mean()

    assert grad_check(ce, start, 1e-5) < 1e-6


def test_grad_check_detects_a_wrong_gradient():
    def bad_square(t):
        # derivative reported as x instead of 2x
        return Tensor._make(t.data ** 2, (t,), lambda g: t._accumulate(g * t.data))
    err = grad_check(lambda p: bad_square(p["w"]).sum(), {"w": np.array([1.0, -2.0])}, 1e-5)
    assert err == pytest.approx(1 / 3, rel=1e-6)


def test_grad_check_subsamples_coordinates():
    calls = []

    def f(p):
        calls.append(1)
        return (p["w"] ** 2).sum()

    grad_check(f, {"w": np.ones(50)}, 1e-5, max_coords=4)
    assert len(calls) == 1 + 2 * 4


def test_grad_check_rejects_non_finite_objective():
    with pytest.raises(ValidityError), np.errstate(invalid="ignore"):
        grad_check(lambda p: p["w"].log().sum(), {"w": np.array([-1.0])}, 1e-5)
