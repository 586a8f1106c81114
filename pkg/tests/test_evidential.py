import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from grad_cases import gradient_errors
from oracles import finite_difference, rel_err
from subjfed.evidential import (
    DEFAULT_SCORE_CLAMP,
    EvidentialModel,
    LossBreakdown,
    NonFiniteLossError,
    ShapeMismatchError,
    TrainConfig,
    _step,
    class_frequency_prior,
    forward,
    load_checkpoint,
    loss_ce,
    loss_cor,
    loss_evi,
    loss_inc,
    loss_neg,
    loss_terms,
    save_checkpoint,
    train_local,
)
from subjfed.special import RngStream

HALF = [0.5, 0.5]


def small_model(seed=0, sizes=(2, 8, 8), k=3, **kw):
    return EvidentialModel.init(list(sizes), k, RngStream(seed), **kw)


def blobs(seed, n=60, sep=3.0):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(-sep, 0.5, (n, 2)), rng.normal(sep, 0.5, (n, 2))])
    return X, np.r_[np.zeros(n, int), np.ones(n, int)]


# --- forward -----------------------------------------------------------------


def test_zero_parameters_give_unit_evidence():
    m = small_model()
    m.set_parameter_vector(np.zeros(m.parameter_vector().size))
    assert np.array_equal(forward(m, np.array([0.3, -2.0])), np.ones(3))


def test_clamp_caps_evidence():
    m = small_model()
    m.set_parameter_vector(np.zeros(m.parameter_vector().size))
    m.head.bias[:] = [DEFAULT_SCORE_CLAMP + 10, 0.0, -1.0]
    e = forward(m, np.zeros(2))
    assert e[0] == math.exp(DEFAULT_SCORE_CLAMP)
    assert e[2] == pytest.approx(math.exp(-1.0))


def test_forward_pure_and_batched():
    m = small_model(3)
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.array_equal(forward(m, x), forward(m, x))
    assert np.allclose(forward(m, x)[2], forward(m, x[2]))


def test_forward_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        forward(small_model(), np.zeros(3))


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2))
def test_forward_finite_nonnegative(x):
    e = forward(small_model(1), np.array(x))
    assert np.all(np.isfinite(e)) and np.all(e >= 0)


# --- loss values ----------------------------------------------------------------


@pytest.mark.parametrize("alpha, expected", [((1, 1), 1.0), ((2, 1), 0.5), ((5, 1), 0.2)])
def test_ce_examples(alpha, expected):
    assert loss_ce(alpha, 0) == pytest.approx(expected, abs=1e-12)


def test_inc_examples():
    assert loss_inc([1.0, 1.0], 0, HALF, 2.0) == pytest.approx(0.0, abs=1e-12)
    # e=(0,1): alpha=(1,2), trimmed=(1,2), reference (1,1)
    assert loss_inc([1.0, 2.0], 0, HALF, 2.0) == pytest.approx(math.log(2) - 0.5, abs=1e-12)


def test_inc_grows_with_wrong_evidence():
    prior = np.array([0.2, 0.3, 0.5])
    for wrong in np.geomspace(0.01, 100, 15):
        a1 = np.array([3.0, wrong, 0.5 * wrong]) + 3 * prior
        a2 = np.array([3.0, 2 * wrong, wrong]) + 3 * prior
        assert loss_inc(a2, 0, prior, 3.0) > loss_inc(a1, 0, prior, 3.0)


def test_cor_examples():
    assert loss_cor([2.0, 1.0], 0, HALF, 2 / 3) == pytest.approx(-(2 / 3) * math.log(1.5), abs=1e-12)
    assert loss_cor([2.0, 1.0], 0, HALF, 0.0) == 0.0
    assert loss_cor([1.5, 1.0], 0, HALF, 0.7) == 0.0


def test_cor_floor():
    assert math.isfinite(loss_cor([0.5, 1.0], 0, HALF, 0.5))


@pytest.mark.parametrize(
    "e, expected", [((5.0, 1.0), 0.0), ((1e4 + 3, 0.0), 9.0), ((1e4 + 1, 1e4 + 2), 5.0)]
)
def test_evi_examples(e, expected):
    assert loss_evi(e, 1e4) == pytest.approx(expected)


@pytest.mark.parametrize("prior, expected", [((0.5, 0.5), 0.0), ((-0.1, 1.1), 0.1), ((-0.2, -0.3, 1.5), 0.5)])
def test_neg_examples(prior, expected):
    assert loss_neg(prior) == pytest.approx(expected, abs=1e-12)


def test_batched_values_match_scalar_losses():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, 6)
    prior = rng.dirichlet(np.ones(4))
    terms = loss_terms(z, y, prior, 4.0, 2.0)
    e = np.exp(z)
    alpha = e + 4.0 * prior
    u = 4.0 / (4.0 + e.sum(axis=1))
    assert terms["ce"][0] == pytest.approx(np.mean([loss_ce(a, t) for a, t in zip(alpha, y)]))
    assert terms["inc"][0] == pytest.approx(np.mean([loss_inc(a, t, prior, 4.0) for a, t in zip(alpha, y)]))
    assert terms["cor"][0] == pytest.approx(np.mean([loss_cor(a, t, prior, w) for a, t, w in zip(alpha, y, u)]))
    assert terms["evi"][0] == pytest.approx(np.mean([loss_evi(row, 2.0) for row in e]))


# --- gradients ------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(0, 100, 7))
def test_term_gradients_against_finite_differences(seed):
    errors = gradient_errors(seed)
    assert max(errors.values()) <= 1e-4, errors


@pytest.mark.parametrize("activation", ["relu", "relu6"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_parameter_gradients_backpropagate(seed, activation):
    rng = np.random.default_rng(seed)
    m = small_model(seed, sizes=(3, 5, 4), k=3, activation=activation)
    m.prior = rng.dirichlet(np.ones(3)) * 0.7 + 0.1
    for layer in m.encoder:  # nonzero biases keep pre-activations off the kinks
        layer.bias[:] = rng.uniform(0.05, 0.3, layer.bias.size)
    x = rng.normal(size=(4, 3))
    y = rng.integers(0, 3, 4)
    cfg = TrainConfig(lambda1=0.7, lambda2=0.3, epsilon=1.5, max_grad_norm=None)

    # cor treats u as a constant, so the reference loss freezes it at the base point
    W = m.prior_weight
    u0 = W / (W + forward(m, x).sum(axis=1))

    def total(vec):
        probe = m.copy()
        probe.set_parameter_vector(vec)
        z = probe.scores(x)
        terms = loss_terms(z, y, probe.prior, W, cfg.epsilon)
        e = np.exp(z)
        gap = e[np.arange(4), y] + (W - 1) * probe.prior[y]
        cor = float(np.mean(-u0 * np.log(gap)))
        return terms["ce"][0] + cor + 0.7 * terms["inc"][0] + 0.3 * terms["evi"][0]

    _, params, grads, _ = _step(m.copy(), x, y, cfg, freeze_encoder=False)
    # _step lists head first, then encoder layers from last to first
    layers = [(m.head.weight, m.head.bias)] + [(l.weight, l.bias) for l in reversed(m.encoder)]
    analytic = {}
    for (w, b), gw, gb in zip(layers, grads[0::2], grads[1::2]):
        analytic[id(w)], analytic[id(b)] = gw, gb
    flat = np.concatenate(
        [analytic[id(a)].ravel() for l in m.encoder for a in (l.weight, l.bias)]
        + [analytic[id(m.head.weight)].ravel(), analytic[id(m.head.bias)].ravel()]
    )
    fd = finite_difference(total, m.parameter_vector())
    assert rel_err(flat, fd) <= 1e-4


# --- training -------------------------------------------------------------------


def test_only_inc_active_keeps_prior_exactly():
    X, y = blobs(1)
    m = small_model(k=2)
    m.prior = np.array([0.4, 0.6])
    # inc is listed but never honoured for the prior; the network still learns
    cfg = TrainConfig(lambda1=1.0, lambda2=0.0, lambda3=0.0, local_epochs=1, prior_terms=("inc",))
    trained, _ = train_local(m, X, y, cfg, RngStream(2))
    assert np.array_equal(trained.prior, m.prior)
    assert not np.array_equal(trained.parameter_vector(), m.parameter_vector())


def test_default_terms_move_the_prior():
    X, y = blobs(1)
    m = small_model(k=2)
    m.prior = np.array([0.4, 0.6])
    trained, _ = train_local(m, X, y, TrainConfig(local_epochs=1), RngStream(2))
    assert not np.array_equal(trained.prior, m.prior)


@pytest.mark.parametrize("seed", range(4))
def test_prior_stays_on_simplex(seed):
    X, y = blobs(seed, n=40)
    m = small_model(seed, k=2)
    m.prior = np.array([0.9, 0.1])
    model = m
    for epoch in range(3):
        model, _ = train_local(model, X, y, TrainConfig(learning_rate=0.2, local_epochs=1), RngStream(seed, epoch))
        assert np.all(model.prior >= 0) and abs(model.prior.sum() - 1) <= 1e-12


def test_zero_learning_rate_is_a_null_update():
    X, y = blobs(2)
    m = small_model(k=2)
    trained, _ = train_local(m, X, y, TrainConfig(learning_rate=0.0, local_epochs=2), RngStream(0))
    assert np.array_equal(trained.parameter_vector(), m.parameter_vector())
    assert np.array_equal(trained.prior, m.prior)


def test_training_is_deterministic():
    X, y = blobs(3)
    runs = [train_local(small_model(k=2), X, y, TrainConfig(local_epochs=2), RngStream(9))[0] for _ in range(2)]
    assert np.array_equal(runs[0].parameter_vector(), runs[1].parameter_vector())
    assert np.array_equal(runs[0].prior, runs[1].prior)


def test_breakdown_total_identity():
    X, y = blobs(4)
    cfg = TrainConfig(lambda1=0.3, lambda2=0.5, lambda3=2.0, epsilon=5.0, local_epochs=3)
    _, history = train_local(small_model(k=2), X, y, cfg, RngStream(0))
    for h in history:
        recon = h.ce + h.cor + 0.3 * h.inc + 0.5 * h.evi + 2.0 * h.neg
        assert abs(h.total - recon) <= 1e-9 * max(1.0, abs(h.total))


def test_separable_blobs_fit_perfectly_without_regularisers():
    X, y = blobs(5, sep=2.0)
    # logistic-regression oracle: the classes are linearly separable
    w = np.zeros(3)
    Xb = np.c_[X, np.ones(len(X))]
    for _ in range(2000):
        p = 1 / (1 + np.exp(-Xb @ w))
        w -= 0.1 * Xb.T @ (p - y) / len(y)
    assert np.mean((Xb @ w > 0) == y) == 1.0
    cfg = TrainConfig(lambda1=0.0, lambda2=0.0, lambda3=0.0, local_epochs=50)
    trained, _ = train_local(small_model(k=2), X, y, cfg, RngStream(5))
    assert np.mean(forward(trained, X).argmax(axis=1) == y) == 1.0


def _imbalanced():
    rng = np.random.default_rng(0)
    X = np.concatenate([rng.normal([2, 0], 0.5, (990, 2)), rng.normal([-2, 0], 0.5, (10, 2))])
    return X, np.r_[np.zeros(990, int), np.ones(10, int)]


@pytest.mark.slow
def test_evidence_explodes_without_evi_term_and_is_held_with_it():
    X, y = _imbalanced()
    eps = 1e4
    exploded = False
    for seed in range(2):
        m = EvidentialModel.init([2, 32, 32], 2, RngStream(seed))
        cfg = TrainConfig(lambda2=0.0, local_epochs=1)
        for epoch in range(200):
            m, _ = train_local(m, X, y, cfg, RngStream(seed, epoch))
            if forward(m, X[y == 0]).max() > 10 * eps:
                exploded = True
                break
        if exploded:
            break
    assert exploded

    m = EvidentialModel.init([2, 32, 32], 2, RngStream(0))
    cfg = TrainConfig(lambda2=1.0, local_epochs=1)
    for epoch in range(200):
        m, _ = train_local(m, X, y, cfg, RngStream(0, epoch))
        assert forward(m, X).max() <= 2 * eps


def test_non_finite_loss_is_reported():
    X, y = blobs(6)
    m = small_model(k=2)
    m.head.weight[:] = np.nan
    with pytest.raises(NonFiniteLossError):
        train_local(m, X, y, TrainConfig(local_epochs=1), RngStream(0))


@pytest.mark.parametrize(
    "X, y", [(np.zeros((0, 2)), np.zeros(0, int)), (np.zeros((2, 2)), np.array([0, 5]))]
)
def test_train_rejects_bad_data(X, y):
    with pytest.raises(ValueError):
        train_local(small_model(k=2), X, y, TrainConfig(), RngStream(0))


def test_frozen_encoder_only_moves_head():
    X, y = blobs(7)
    m = small_model(k=2)
    trained, _ = train_local(m, X, y, TrainConfig(local_epochs=1), RngStream(0), freeze_encoder=True)
    assert np.array_equal(trained.encoder_vector(), m.encoder_vector())
    assert not np.array_equal(trained.head_vector(), m.head_vector())


def test_gradient_clipping_bounds_the_step():
    X, y = blobs(8)
    m = small_model(k=2)
    cfg = TrainConfig(learning_rate=1.0, local_epochs=1, batch_size=len(y), max_grad_norm=0.5)
    trained, _ = train_local(m, X, y, cfg, RngStream(0))
    assert np.linalg.norm(trained.parameter_vector() - m.parameter_vector()) <= 0.5 + 1e-9


@pytest.mark.parametrize(
    "kwargs",
    [dict(learning_rate=-1.0), dict(epsilon=0.0), dict(lambda1=-0.1), dict(max_grad_norm=0.0), dict(prior_terms=("xx",))],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_class_frequency_prior_is_smoothed():
    assert np.allclose(class_frequency_prior(np.array([0, 0, 0, 1]), 3), [4 / 7, 2 / 7, 1 / 7])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = small_model(4, activation="relu")
    m.prior = np.array([0.2, 0.3, 0.5])
    path = tmp_path / "model.npz"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert np.array_equal(back.parameter_vector(), m.parameter_vector())
    assert np.array_equal(back.prior, m.prior)
    assert (back.prior_weight, back.score_clamp, back.activation) == (m.prior_weight, m.score_clamp, "relu")


def test_loss_breakdown_dict():
    assert set(LossBreakdown().as_dict()) == {"total", "ce", "cor", "inc", "evi", "neg"}
