import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lieshape import autodiff as ad
from lieshape.objectives import (
    LossWeights,
    build_losses,
    inner_product_loss,
    l1_reg,
    lambda_scale_loss,
    masked_recon_loss,
    objective_P,
    objective_T,
    pattern_areas,
    pattern_entropy,
    recon_loss_patterns,
)
from lieshape.scene import ModelState, cumulative_lambda, reconstruct

REFERENCE_WEIGHTS = LossWeights(alpha=0.001, beta=0.0001, gamma=0.1, delta=0.0001)


def const(x):
    return ad.Tape().constant(np.asarray(x, dtype=np.float64))


def consts(*xs):
    tape = ad.Tape()
    return [tape.constant(np.asarray(x, dtype=np.float64)) for x in xs]


def random_instance(seed, L=2, K=2, N=2, H=7, W=7):
    rng = np.random.default_rng(seed)
    X = np.zeros((N + 1, H, W))
    for i in range(N + 1):
        X[i, 2:5, 1 + i : 4 + i] = rng.uniform(0.5, 1.0, (3, 3))
    state = ModelState(
        rng.normal(size=(L, H, W)),
        rng.normal(0, 0.3, (K, 2, 2)),
        rng.normal(0, 0.3, (K, 2)),
        rng.normal(0, 0.3, (K, L, N)),
    )
    return X, state


def onehot_weights(Q_counts, shape=(4, 4)):
    """Weights whose support shares are Q_counts / 16 on an all-ones image."""
    L = len(Q_counts)
    w = np.zeros((L,) + shape)
    flat = w.reshape(L, -1)
    start = 0
    for l, c in enumerate(Q_counts):
        flat[l, start : start + c] = 1.0
        start += c
    return w


# -- reconstruction losses ------------------------------------------------------


def test_recon_zero_for_perfect_match():
    X = np.random.default_rng(0).uniform(size=(3, 5, 5))
    assert recon_loss_patterns(X, const(X), 0.9).value == 0.0


def test_recon_single_pixel_error():
    X = np.zeros((2, 4, 4))
    Y = X.copy()
    Y[1, 2, 2] = 1.0
    assert recon_loss_patterns(X, const(Y), 0.9).value == pytest.approx(0.9, abs=1e-15)


def test_recon_uniform_error_closed_form():
    e = 0.3
    X = np.zeros((3, 15, 15))
    Y = X + e
    expected = 225 * e**2 * (0.5 + 0.25)
    assert recon_loss_patterns(X, const(Y), 0.5).value == pytest.approx(expected, rel=1e-12)


def test_recon_ignores_first_frame():
    X = np.zeros((2, 3, 3))
    Y = X.copy()
    Y[0] = 5.0
    assert recon_loss_patterns(X, const(Y), 1.0).value == 0.0


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        recon_loss_patterns(np.zeros((3, 4, 4)), const(np.zeros((2, 4, 4))), 0.9)
    with pytest.raises(ValueError):
        masked_recon_loss(np.zeros((3, 4, 4)), const(np.zeros((3, 4, 5))), 0.9)


def test_masked_examples():
    rng = np.random.default_rng(1)
    X = (rng.uniform(size=(3, 6, 6)) > 0.6).astype(float)
    assert masked_recon_loss(X, const(np.where(X > 0, 1.0, 7.0)), 0.9).value == 0.0
    zero = masked_recon_loss(X, const(np.zeros_like(X)), 0.9).value
    assert zero == pytest.approx(0.9 * X[1].sum() + 0.81 * X[2].sum(), rel=1e-14)
    half = masked_recon_loss(X, const(np.where(X > 0, 0.5, 0.0)), 0.9).value
    assert half == pytest.approx(0.25 * (0.9 * X[1].sum() + 0.81 * X[2].sum()), rel=1e-14)


def test_masked_loss_blind_off_support():
    X = np.zeros((2, 5, 5))
    X[1, 2, 2] = 0.8
    Y = np.random.default_rng(2).uniform(size=(2, 5, 5))
    tape = ad.Tape()
    y = tape.leaf(Y)
    g = tape.backward(masked_recon_loss(X, y, 0.9))[y.id]
    off = X == 0
    off[0] = True
    assert not g[off].any()


# -- entropy -----------------------------------------------------------------


@pytest.mark.parametrize(
    "counts, expected",
    [((16, 0, 0), 0.0), ((16, 0), 0.0), ((8, 8, 0), math.log(2))],
)
def test_entropy_examples(counts, expected):
    w = onehot_weights(counts)
    assert pattern_entropy(const(w), np.ones((4, 4))).value == pytest.approx(expected, abs=1e-10)


def test_entropy_uniform():
    w = np.full((3, 4, 4), 1 / 3)
    assert pattern_entropy(const(w), np.ones((4, 4))).value == pytest.approx(math.log(3), abs=1e-10)


def test_entropy_empty_support():
    with pytest.raises(ValueError, match="empty support"):
        pattern_entropy(const(np.full((2, 3, 3), 0.5)), np.zeros((3, 3)))


def test_areas_sum_to_one_and_ignore_background():
    rng = np.random.default_rng(3)
    w = rng.dirichlet(np.ones(3), size=(5, 5)).transpose(2, 0, 1)
    X0 = (rng.uniform(size=(5, 5)) > 0.5).astype(float)
    Q = pattern_areas(w, X0)
    assert Q.sum() == pytest.approx(1.0, abs=1e-12)
    w2 = w.copy()
    w2[:, X0 == 0] = rng.dirichlet(np.ones(3), size=int((X0 == 0).sum())).T
    np.testing.assert_allclose(pattern_areas(w2, X0), Q, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_entropy_bounds_and_permutation(seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1)
    X0 = np.ones((4, 4))
    h = pattern_entropy(const(w), X0).value
    assert 0.0 <= h <= math.log(3) + 1e-9
    assert pattern_entropy(const(w[[1, 2, 0]]), X0).value == pytest.approx(h, abs=1e-14)


# -- transformer regularisers ----------------------------------------------------


def test_l1_examples():
    assert l1_reg(*consts(np.zeros((2, 2, 2)), np.zeros((2, 2)))).value == 0.0
    assert l1_reg(*consts(np.eye(2)[None], [[1.0, -1.0]])).value == 4.0


def test_l1_table_transformer_two():
    A = np.array([[[-0.0049, 0.0095], [-0.0014, -0.0024]]])
    b = np.array([[0.97, 0.014]])
    assert l1_reg(*consts(A, b)).value == pytest.approx(1.0022, abs=1e-12)


def test_lambda_scale_examples():
    lam = np.array([[[0.0, 0.5, 1.0], [0.0, -0.2, -0.4]]])
    assert lambda_scale_loss(const(lam)).value == 0.0
    assert lambda_scale_loss(const([[[0.0, 2.0]]])).value == pytest.approx(1.0, abs=1e-15)
    assert lambda_scale_loss(const(np.zeros((2, 3, 4)))).value == 0.0


def test_lambda_scale_inert_slice_skipped():
    lam = np.zeros((2, 1, 3))
    lam[0, 0] = [0.0, 1e-8, 5e-7]
    lam[1, 0] = [0.0, 1.0, 2.0]
    assert lambda_scale_loss(const(lam)).value == pytest.approx(0.5 + 1.0, abs=1e-15)


def test_lambda_scale_gradient_ignores_normalizer():
    tape = ad.Tape()
    lam = tape.leaf(np.array([[[0.0, 2.0]]]))
    g = tape.backward(lambda_scale_loss(lam))[lam.id]
    np.testing.assert_array_equal(g, [[[0.0, 1.0]]])


@pytest.mark.parametrize("seed", range(5))
def test_lambda_scale_detects_growth(seed):
    rng = np.random.default_rng(seed)
    lam = cumulative_lambda(rng.normal(size=(1, 3, 4)))
    lam /= np.abs(lam[:, :, -1]).max()
    assert lambda_scale_loss(const(lam)).value == pytest.approx(0.0, abs=1e-12)
    assert lambda_scale_loss(const(2 * lam)).value > 0.0


def test_inner_product_examples():
    z = np.zeros((2, 2, 2))
    assert inner_product_loss(*consts(np.zeros((1, 2, 2)), [[1.0, 2.0]])).value == 0.0
    assert inner_product_loss(*consts(z, [[1.0, 0.0], [0.0, 1.0]])).value == 0.0
    assert inner_product_loss(*consts(z, [[1.0, 0.0], [1.0, 0.0]])).value == 1.0
    # antiparallel vectors are penalised, not rewarded
    assert inner_product_loss(*consts(z, [[1.0, 0.0], [-1.0, 0.0]])).value == 1.0


def test_inner_product_vectorises_matrices():
    A = np.stack([np.eye(2), np.eye(2)])
    b = np.zeros((2, 2))
    assert inner_product_loss(*consts(A, b)).value == 4.0


# -- full objectives ------------------------------------------------------------


def test_objective_P_arithmetic():
    X, state = random_instance(0)
    total, rep, _ = objective_P(X, state, REFERENCE_WEIGHTS)
    assert total == pytest.approx(rep.recon_P + 0.001 * rep.entropy, abs=1e-12)
    no_alpha, rep0, _ = objective_P(X, state, LossWeights(alpha=0.0))
    Y = reconstruct(state, X[0])
    assert no_alpha == pytest.approx(recon_loss_patterns(X, const(Y), 0.9).value, abs=1e-12)


def test_objective_P_hand_example():
    # recon 0.5 and uniform pattern areas over three patterns
    assert 0.5 + 0.001 * math.log(3) == pytest.approx(0.5010986, abs=1e-7)


def test_objective_T_terms_sum():
    X, state = random_instance(1)
    total, rep, grads = objective_T(X, state, REFERENCE_WEIGHTS)
    hand = rep.recon_T_masked + 0.0001 * rep.l1 + 0.1 * rep.lambda_scale + 0.0001 * rep.inner_prod
    assert total == pytest.approx(hand, abs=1e-12)
    assert set(grads) == {"A", "b", "delta_lambda"}
    bare, rep0, _ = objective_T(X, state, LossWeights(beta=0, gamma=0, delta=0))
    assert bare == rep0.recon_T_masked


def test_objective_T_inert_model():
    X, state = random_instance(2)
    state.A[:] = 0.0
    state.b[:] = 0.0
    state.delta_lambda[:] = 0.0
    _, rep, _ = objective_T(X, state, REFERENCE_WEIGHTS)
    assert rep.l1 == 0.0 and rep.inner_prod == 0.0
    assert all(np.isfinite(v) for v in rep.as_dict().values())


def test_objective_P_only_moves_logits():
    X, state = random_instance(3)
    _, _, grads = objective_P(X, state, REFERENCE_WEIGHTS)
    assert set(grads) == {"logits"}


def test_perfect_reconstruction_one_pattern():
    X0 = np.zeros((7, 7))
    X0[3, 1] = 1.0
    X = np.stack([np.roll(X0, i, axis=1) for i in range(3)])
    state = ModelState(np.zeros((1, 7, 7)), np.zeros((1, 2, 2)), [[1.0, 0.0]], [[[1 / 3, 1 / 3]]])
    total, rep, _ = objective_P(X, state, REFERENCE_WEIGHTS)
    assert total == pytest.approx(0.0, abs=1e-10)
    assert rep.recon_T_masked == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("seed", range(3))
def test_all_losses_nonnegative(seed):
    X, state = random_instance(seed + 10, L=3, K=3, N=3)
    tape = ad.Tape()
    nodes = {k: tape.constant(v) for k, v in state.params().items()}
    rep = build_losses(tape, X, nodes, REFERENCE_WEIGHTS).report()
    assert all(v >= 0 and np.isfinite(v) for v in rep.as_dict().values())


@pytest.mark.parametrize("which", ["P", "T"])
def test_objective_gradients(which):
    X, state = random_instance(4)
    total = "total_P" if which == "P" else "total_T"
    trainable = ("logits",) if which == "P" else ("A", "b", "delta_lambda")
    fixed = state.params()

    def f(tape, leaves):
        nodes = {k: leaves[k] if k in leaves else tape.constant(v) for k, v in fixed.items()}
        return getattr(build_losses(tape, X, nodes, REFERENCE_WEIGHTS), total)

    report = ad.grad_check(f, {k: fixed[k] for k in trainable}, h=1e-5)
    assert report.max_rel_error < 1e-4


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(r=0.0)
    with pytest.raises(ValueError):
        LossWeights(r=1.5)
    with pytest.raises(ValueError):
        LossWeights(gamma=-1.0)
