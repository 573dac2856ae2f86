import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metasolve import tensor as T
from metasolve.errors import CapacityError, DimensionError, ValidationError
from metasolve.solvers import (IrlsState, SolverHyperparams, calibrate, inverse_softplus, irls_fit,
                               irls_step, one_vs_all_fit, one_vs_all_logits, ridge_fit,
                               ridge_fit_diag, ridge_fit_naive, ridge_fit_woodbury)
from metasolve.tensor import Node

from .oracles import logistic_gd_oracle, logistic_objective_grad


def instance(seed, n=4, e=7, o=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, e)), np.eye(o)[rng.integers(0, o, n)]


# --- hyper-parameters ---------------------------------------------------------

def test_hyperparams_softplus_keeps_lambda_positive():
    hp = SolverHyperparams.create(1e-6)
    assert hp.lam.item() == pytest.approx(1e-6, rel=1e-6)
    hp.lambda_raw.value = np.array(-50.0)
    assert hp.lam.item() > 0


def test_inverse_softplus_roundtrip():
    x = np.array([1e-4, 0.5, 1.0, 30.0])
    np.testing.assert_allclose(np.logaddexp(0, inverse_softplus(x)), x, rtol=1e-12)


def test_hyperparams_defaults_and_masks():
    hp = SolverHyperparams.create()
    assert hp.lambda_value() == pytest.approx(1.0)
    assert hp.alpha.item() == 1.0 and hp.beta.item() == 0.0
    frozen = SolverHyperparams.create(learn_lambda=False)
    assert "lambda_raw" not in frozen.parameters()
    assert set(frozen.parameters()) == {"alpha", "beta"}


def test_hyperparams_vector_lambda_length():
    hp = SolverHyperparams.create(0.5, dim=6)
    assert hp.is_diagonal and hp.lam.shape == (6,)


# --- ridge -----------------------------------------------------------------

@pytest.mark.parametrize("fit", [ridge_fit_naive, ridge_fit_woodbury])
def test_ridge_identity_case(fit):
    W = fit(np.eye(2), np.array([[1.0], [0.0]]), 1.0)
    np.testing.assert_allclose(W.value, [[0.5], [0.0]], atol=1e-15)


def test_ridge_huge_lambda_shrinks_to_zero():
    X, Y = instance(0)
    assert np.max(np.abs(ridge_fit_naive(X, Y, 1e8).value)) < 1e-6


@pytest.mark.parametrize("fit", [ridge_fit_naive, ridge_fit_woodbury])
def test_ridge_first_order_condition(fit):
    X, Y = instance(1)
    lam = 0.5
    W = fit(X, Y, lam).value
    grad = 2 * X.T @ (X @ W - Y) + 2 * lam * W
    assert np.max(np.abs(grad)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 12), e=st.integers(1, 40), o=st.integers(1, 5),
       lam=st.floats(1e-3, 1e2), seed=st.integers(0, 10_000))
def test_ridge_normal_equations_and_identity(n, e, o, lam, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.standard_normal((n, e)), rng.standard_normal((n, o))
    Wn = ridge_fit_naive(X, Y, lam).value
    Ww = ridge_fit_woodbury(X, Y, lam).value
    rhs = X.T @ Y
    for W in (Wn, Ww):
        assert np.max(np.abs((X.T @ X + lam * np.eye(e)) @ W - rhs)) < 1e-9 * (1 + np.max(np.abs(rhs)))
    assert np.linalg.norm(Wn - Ww) <= 1e-8 * max(np.linalg.norm(Wn), 1e-300)


@settings(max_examples=30, deadline=None)
@given(l1=st.floats(1e-3, 1e2), ratio=st.floats(1.0, 100.0), seed=st.integers(0, 10_000))
def test_ridge_monotone_shrinkage(l1, ratio, seed):
    X, Y = instance(seed, 5, 9, 3)
    w1 = np.linalg.norm(ridge_fit_woodbury(X, Y, l1).value)
    w2 = np.linalg.norm(ridge_fit_woodbury(X, Y, l1 * ratio).value)
    assert w2 <= w1 * (1 + 1e-12)


def test_ridge_row_permutation_invariance():
    X, Y = instance(2, 6, 10, 3)
    perm = np.random.default_rng(3).permutation(6)
    a = ridge_fit_woodbury(X, Y, 0.3).value
    b = ridge_fit_woodbury(X[perm], Y[perm], 0.3).value
    assert np.max(np.abs(a - b)) < 1e-12


def test_naive_capacity_error_suggests_woodbury():
    X, Y = instance(0, 2, 100, 2)
    with pytest.raises(CapacityError, match="Woodbury"):
        ridge_fit_naive(X, Y, 1.0, max_bytes=100 * 100 * 8 - 1)


def test_ridge_rejects_bad_shapes_and_lambda():
    with pytest.raises(DimensionError):
        ridge_fit_woodbury(np.ones((3, 2)), np.ones((2, 2)), 1.0)
    with pytest.raises(ValidationError):
        ridge_fit_woodbury(np.ones((3, 2)), np.ones((3, 2)), 0.0)


def test_diag_constant_vector_matches_scalar():
    X, Y = instance(4, 5, 12, 3)
    a = ridge_fit_diag(X, Y, np.full(12, 0.7)).value
    b = ridge_fit_woodbury(X, Y, 0.7).value
    assert np.max(np.abs(a - b)) < 1e-10


def test_diag_huge_entry_zeroes_row():
    X, Y = instance(5, 5, 8, 3)
    lam = np.ones(8)
    lam[3] = 1e8
    W = ridge_fit_diag(X, Y, lam).value
    assert np.max(np.abs(W[3])) < 1e-6
    assert np.max(np.abs(W[2])) > 1e-3


def test_diag_first_order_condition():
    X, Y = instance(6, 5, 8, 3)
    lam = np.random.default_rng(6).uniform(0.1, 3.0, 8)
    W = ridge_fit_diag(X, Y, lam).value
    grad = 2 * X.T @ (X @ W - Y) + 2 * lam[:, None] * W
    assert np.max(np.abs(grad)) < 1e-9


def test_diag_validation():
    X, Y = instance(7, 3, 4, 2)
    with pytest.raises(ValidationError):
        ridge_fit_diag(X, Y, np.array([1.0, 1.0, 0.0, 1.0]))
    with pytest.raises(DimensionError):
        ridge_fit_diag(X, Y, np.ones(3))


def test_ridge_dispatch_uses_diag_for_vector_lambda():
    X, Y = instance(8, 4, 6, 2)
    hp = SolverHyperparams.create(0.4, dim=6)
    np.testing.assert_allclose(ridge_fit(X, Y, hp).value, ridge_fit_woodbury(X, Y, 0.4).value,
                               atol=1e-12)
    with pytest.raises(ValidationError):
        ridge_fit(X, Y, SolverHyperparams.create(), method="svd")


@pytest.mark.parametrize("method", ["naive", "woodbury", "diag"])
def test_ridge_gradients_fd(method):
    rng = np.random.default_rng(9)
    X = Node(rng.standard_normal((4, 5)), True)
    Y = Node(np.eye(3)[[0, 1, 2, 1]], True)
    hp = SolverHyperparams.create(0.8, 1.3, 0.2, dim=5 if method == "diag" else None)
    Xq = Node(rng.standard_normal((6, 5)), True)
    yq = np.eye(3)[[2, 0, 1, 1, 0, 2]]

    def f():
        return T.softmax_cross_entropy(calibrate(Xq, ridge_fit(X, Y, hp, "naive" if method == "naive"
                                                               else "woodbury"), hp), yq)

    assert T.grad_check(f, [X, Y, Xq, hp.lambda_raw, hp.alpha, hp.beta]) < 1e-4


# --- calibration -------------------------------------------------------------

def test_calibrate_identity_and_affine():
    Xq = np.array([[1.0, 0.0]])
    W = Node([[0.5, -0.5], [9.0, 9.0]])
    np.testing.assert_array_equal(calibrate(Xq, W, SolverHyperparams.create()).value, [[0.5, -0.5]])
    np.testing.assert_array_equal(calibrate(Xq, W, SolverHyperparams.create(alpha=2.0, beta=1.0)).value,
                                  [[2.0, 0.0]])


def test_calibrate_zero_alpha_gives_uniform_loss():
    X, Y = instance(10, 4, 6, 5)
    hp = SolverHyperparams.create(alpha=0.0, beta=0.3)
    logits = calibrate(X, ridge_fit(X, Y, hp), hp)
    assert T.softmax_cross_entropy(logits, Y).item() == pytest.approx(np.log(5), abs=1e-12)


# --- IRLS ---------------------------------------------------------------------

def test_irls_first_step_from_zero():
    X = np.array([[1.0, 2.0], [0.5, -1.0], [2.0, 0.0]])
    y = np.array([1.0, -1.0, 1.0])
    st0 = irls_step(X, y, IrlsState.initial(2), 1.0)
    np.testing.assert_array_equal(st0.mu.value, 0.5)
    np.testing.assert_array_equal(st0.s.value, 0.25)
    np.testing.assert_allclose(st0.z.value[:, 0], 2 * y)


def test_irls_single_sample_arithmetic():
    w = irls_fit(np.array([[1.0, 0.0]]), np.array([1.0]), 1.0, 1).value
    np.testing.assert_allclose(w[:, 0], [0.4, 0.0], atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 15), e=st.integers(1, 20), lam=st.floats(0.05, 10.0),
       seed=st.integers(0, 10_000), steps=st.integers(0, 3))
def test_irls_woodbury_matches_direct_form(n, e, lam, seed, steps):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, e))
    y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    state = IrlsState.initial(e)
    for _ in range(steps):
        state = irls_step(X, y, state, lam)
    nxt = irls_step(X, y, state, lam)
    s, z = nxt.s.value[:, 0], nxt.z.value[:, 0]
    direct = np.linalg.solve(X.T @ (s[:, None] * X) + lam * np.eye(e), X.T @ (s * z))
    np.testing.assert_allclose(nxt.w.value[:, 0], direct, atol=1e-8, rtol=1e-8)


def test_irls_state_invariants_and_iteration_counter():
    X, _ = instance(11, 6, 4)
    y = np.array([1.0, -1, 1, 1, -1, -1])
    state = IrlsState.initial(4)
    for i in range(4):
        state = irls_step(X, y, state, 0.5)
        assert state.iteration == i + 1
        assert np.all((state.mu.value > 0) & (state.mu.value < 1))
        assert np.all((state.s.value > 0) & (state.s.value <= 0.25))


def test_irls_converges_to_stationary_point():
    rng = np.random.default_rng(12)
    X = rng.standard_normal((10, 6))
    y = np.where(rng.random(10) < 0.5, -1.0, 1.0)
    w = irls_fit(X, y, 0.5, 10).value[:, 0]
    assert np.max(np.abs(logistic_objective_grad(X, y, w, 0.5))) < 1e-6
    np.testing.assert_allclose(w, logistic_gd_oracle(X, y, 0.5), atol=1e-6)


@pytest.mark.parametrize("steps", [1, 4, 10])
def test_irls_zero_inputs_stay_zero(steps):
    w = irls_fit(np.zeros((4, 3)), np.array([1.0, -1, 1, -1]), 1.0, steps).value
    assert np.array_equal(w, np.zeros((3, 1)))


def test_irls_mirrored_data_parallel_to_x():
    x = np.array([0.7, -1.2, 0.4])
    w = irls_fit(np.vstack([x, -x]), np.array([1.0, -1.0]), 0.3, 6).value[:, 0]
    perp = w - (w @ x) / (x @ x) * x
    assert np.max(np.abs(perp)) < 1e-10
    assert w @ x > 0


def test_irls_saturation_clamps_s():
    X = np.array([[100.0], [-100.0]])
    state = IrlsState(w=Node(np.array([[10.0]])))
    nxt = irls_step(X, np.array([1.0, -1.0]), state, 1.0)
    assert nxt.clamped == 2
    assert np.all(np.isfinite(nxt.w.value))


def test_irls_row_permutation_invariance():
    rng = np.random.default_rng(13)
    X = rng.standard_normal((8, 5))
    y = np.where(rng.random(8) < 0.5, -1.0, 1.0)
    perm = rng.permutation(8)
    a = irls_fit(X, y, 0.7, 5).value
    b = irls_fit(X[perm], y[perm], 0.7, 5).value
    assert np.max(np.abs(a - b)) < 1e-10


def test_irls_label_and_step_validation():
    with pytest.raises(ValidationError):
        irls_fit(np.ones((2, 2)), np.array([0.0, 1.0]), 1.0, 1)
    with pytest.raises(ValidationError):
        irls_fit(np.ones((2, 2)), np.array([-1.0, 1.0]), 1.0, 0)
    with pytest.raises(DimensionError):
        irls_fit(np.ones((2, 2)), np.array([1.0]), 1.0, 1)


@pytest.mark.parametrize("steps", [1, 3])
def test_irls_gradients_fd(steps):
    rng = np.random.default_rng(14)
    X = Node(rng.standard_normal((5, 4)), True)
    y = np.array([1.0, -1, 1, -1, 1])
    lam = Node(0.6, True)
    Xq = Node(rng.standard_normal((3, 4)), True)
    f = lambda: T.binary_cross_entropy_with_logits(Xq @ irls_fit(X, y, lam, steps),  # noqa: E731
                                                   np.array([1.0, 0.0, 1.0]))
    assert T.grad_check(f, [X, lam, Xq]) < 1e-4


# --- one-vs-all ---------------------------------------------------------------

def test_ova_two_symmetric_classes_are_negatives():
    rng = np.random.default_rng(15)
    X = rng.standard_normal((6, 4))
    Y = np.eye(2)[[0, 1, 0, 1, 1, 0]]
    W = one_vs_all_fit(X, Y, 0.5, 5).value
    np.testing.assert_allclose(W[:, 0], -W[:, 1], atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(extra=st.integers(0, 8), e=st.integers(1, 30), ways=st.integers(2, 6), steps=st.integers(1, 5),
       lam=st.floats(0.05, 10.0), seed=st.integers(0, 10_000))
def test_ova_columns_match_separate_binary_fits(extra, e, ways, steps, lam, seed):
    rng = np.random.default_rng(seed)
    n = ways + extra
    X = rng.standard_normal((n, e))
    Y = np.eye(ways)[rng.permutation(np.arange(n) % ways)]
    W = one_vs_all_fit(X, Y, lam, steps).value
    for c in range(ways):
        w = irls_fit(X, 2.0 * Y[:, c] - 1.0, lam, steps).value[:, 0]
        np.testing.assert_allclose(W[:, c], w, rtol=1e-9, atol=1e-11)


def test_ova_gradients_fd():
    rng = np.random.default_rng(17)
    X = Node(rng.standard_normal((6, 4)), True)
    Xq = Node(rng.standard_normal((4, 4)), True)
    lam = Node(0.8, True)
    Y = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    f = lambda: T.softmax_cross_entropy(one_vs_all_logits(Xq, one_vs_all_fit(X, Y, lam, 3)),  # noqa: E731
                                        np.eye(3)[[2, 0, 1, 1]])
    assert T.grad_check(f, [X, lam, Xq]) < 1e-6


def test_ova_separated_clusters_fit_training_set():
    rng = np.random.default_rng(16)
    centers = 5.0 * np.eye(3, 6)
    X = np.vstack([c + 0.3 * rng.standard_normal((4, 6)) for c in centers])
    Y = np.repeat(np.eye(3), 4, axis=0)
    logits = one_vs_all_logits(X, one_vs_all_fit(X, Y, 0.1, 5)).value
    assert np.mean(logits.argmax(1) == Y.argmax(1)) == 1.0
    np.testing.assert_array_equal((logits + 7.5).argmax(1), logits.argmax(1))


def test_ova_validation():
    with pytest.raises(ValidationError, match=r"\[2\]"):
        one_vs_all_fit(np.ones((3, 2)), np.eye(3)[[0, 1, 1]], 1.0, 2)
    with pytest.raises(ValidationError):
        one_vs_all_fit(np.ones((3, 2)), np.ones((3, 1)), 1.0, 2)
