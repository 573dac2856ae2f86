"""Differentiable base learners: closed-form ridge regression and IRLS
logistic regression, plus the affine output calibration.

Samples are rows throughout: ``X`` is ``[n, e]``, one-hot targets ``Y`` are
``[n, o]`` and the head weights ``W`` are ``[e, o]`` (``[e, 1]`` for a binary
logistic head). All functions take and return :class:`~metasolve.tensor.Node`
objects so gradients reach the embedding and the hyper-parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import CapacityError, DimensionError, ValidationError
from .tensor import Node

NAIVE_MAX_BYTES = 1 << 30
S_FLOOR = 1e-12


def inverse_softplus(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValidationError("softplus is strictly positive; cannot invert a non-positive value")
    return x + np.log(-np.expm1(-x))


@dataclass
class SolverHyperparams:
    """Base-learner hyper-parameters: ``lambda = softplus(lambda_raw)``, scale
    ``alpha`` and bias ``beta``.

    ``lambda_raw`` is a scalar node or, for the per-dimension prior, an
    ``[e]`` vector. The ``learn_*`` flags decide which fields the outer loop
    updates.
    """

    lambda_raw: Node
    alpha: Node
    beta: Node
    learn_lambda: bool = True
    learn_alpha: bool = True
    learn_beta: bool = True

    @classmethod
    def create(cls, lam: float = 1.0, alpha: float = 1.0, beta: float = 0.0, *,
               dim: int | None = None, learn_lambda: bool = True,
               learn_alpha: bool = True, learn_beta: bool = True) -> "SolverHyperparams":
        raw = inverse_softplus(lam)
        if dim is not None:
            raw = np.full(dim, float(raw))
        return cls(
            lambda_raw=Node(raw, learn_lambda, name="lambda_raw"),
            alpha=Node(alpha, learn_alpha, name="alpha"),
            beta=Node(beta, learn_beta, name="beta"),
            learn_lambda=learn_lambda,
            learn_alpha=learn_alpha,
            learn_beta=learn_beta,
        )

    @property
    def is_diagonal(self) -> bool:
        return self.lambda_raw.ndim == 1

    @property
    def lam(self) -> Node:
        return T.softplus(self.lambda_raw)

    def lambda_value(self) -> float:
        """Effective lambda, averaged over entries for the vector form."""
        return float(np.mean(np.logaddexp(0.0, self.lambda_raw.value)))

    def named(self) -> dict[str, Node]:
        return {"lambda_raw": self.lambda_raw, "alpha": self.alpha, "beta": self.beta}

    def parameters(self) -> dict[str, Node]:
        mask = {"lambda_raw": self.learn_lambda, "alpha": self.learn_alpha, "beta": self.learn_beta}
        return {k: v for k, v in self.named().items() if mask[k]}


def _lambda_node(hp) -> Node:
    if isinstance(hp, SolverHyperparams):
        return hp.lam
    lam = T.as_node(hp)
    if np.any(lam.value <= 0):
        raise ValidationError("lambda must be strictly positive")
    return lam


def _check_xy(X: Node, Y: Node) -> None:
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise DimensionError(f"X {X.shape} and Y {Y.shape} must be matrices with equal rows")
    if X.shape[0] < 1:
        raise ValidationError("need at least one sample")


def ridge_fit_naive(X, Y, hp, max_bytes: int = NAIVE_MAX_BYTES) -> Node:
    """``W = (XᵀX + λI)⁻¹ XᵀY``, solving the ``e x e`` system."""
    X, Y = T.as_node(X), T.as_node(Y)
    _check_xy(X, Y)
    e = X.shape[1]
    if e * e * 8 > max_bytes:
        raise CapacityError(
            f"naive ridge needs a {e}x{e} system ({e * e * 8} bytes > cap {max_bytes}); "
            "use the Woodbury path"
        )
    A = T.add_diag(T.gram(X, outer=False), _lambda_node(hp))
    return T.solve_spd(A, X.T @ Y)


def ridge_fit_woodbury(X, Y, hp) -> Node:
    """``W = Xᵀ (XXᵀ + λI)⁻¹ Y``; only an ``n x n`` system is factorized."""
    X, Y = T.as_node(X), T.as_node(Y)
    _check_xy(X, Y)
    lam = _lambda_node(hp)
    if lam.value.size != 1:
        raise DimensionError("Woodbury ridge takes a scalar lambda; use ridge_fit_diag")
    A = T.add_diag(T.gram(X, outer=True), lam)
    return X.T @ T.solve_spd(A, Y)


def ridge_fit_diag(X, Y, lam_vec) -> Node:
    """Per-dimension regularizer: ``W = D⁻¹Xᵀ (X D⁻¹ Xᵀ + I)⁻¹ Y`` with ``D = diag(λ)``."""
    X, Y = T.as_node(X), T.as_node(Y)
    _check_xy(X, Y)
    lam = lam_vec.lam if isinstance(lam_vec, SolverHyperparams) else T.as_node(lam_vec)
    if lam.shape != (X.shape[1],):
        raise DimensionError(f"lambda vector {lam.shape} does not match embedding size {X.shape[1]}")
    if np.any(lam.value <= 0):
        raise ValidationError("every lambda entry must be strictly positive")
    Xs = X * (1.0 / lam)
    A = T.add_diag(Xs @ X.T, 1.0)
    return Xs.T @ T.solve_spd(A, Y)


def ridge_fit(X, Y, hp: SolverHyperparams, method: str = "woodbury") -> Node:
    if isinstance(hp, SolverHyperparams) and hp.is_diagonal:
        return ridge_fit_diag(X, Y, hp)
    if method == "naive":
        return ridge_fit_naive(X, Y, hp)
    if method == "woodbury":
        return ridge_fit_woodbury(X, Y, hp)
    raise ValidationError(f"unknown ridge method {method!r}")


def calibrate(Xq, W, hp: SolverHyperparams) -> Node:
    """``alpha * Xq W + beta``."""
    return hp.alpha * (T.as_node(Xq) @ W) + hp.beta


# ---------------------------------------------------------------------------
# IRLS logistic regression

@dataclass
class IrlsState:
    """One IRLS iterate. ``w`` is ``[e, 1]``; ``mu``, ``s``, ``z`` are
    ``[n, 1]`` and describe the step that produced ``w``."""

    w: Node
    mu: Node | None = None
    s: Node | None = None
    z: Node | None = None
    iteration: int = 0
    clamped: int = 0

    @classmethod
    def initial(cls, dim: int) -> "IrlsState":
        return cls(w=Node(np.zeros((dim, 1))))


def _signed_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape != (n,):
        raise DimensionError(f"labels of length {y.size} for {n} samples")
    if not np.all((y == 1.0) | (y == -1.0)):
        raise ValidationError("IRLS labels must be -1 or +1")
    return y.reshape(n, 1)


def irls_step(X, y, state: IrlsState, lam) -> IrlsState:
    """One Newton step for L2-regularized logistic regression, Woodbury form:
    ``w = Xᵀ (XXᵀ + λ diag(s)⁻¹)⁻¹ z``."""
    X = T.as_node(X)
    n = X.shape[0]
    y = _signed_labels(y, n)
    t = 0.5 * (y + 1.0)
    lam = _lambda_node(lam)
    if lam.value.size != 1:
        raise DimensionError("IRLS takes a scalar lambda")

    eta = X @ state.w
    mu = T.sigmoid(eta)
    s_raw = mu * (1.0 - mu)
    clamped = int(np.count_nonzero(s_raw.value < S_FLOOR))
    s = T.clamp_min(s_raw, S_FLOOR)
    z = eta + (t - mu) / s
    A = T.add_diag(T.gram(X, outer=True), lam / s)
    w = X.T @ T.solve_spd(A, z)
    return IrlsState(w=w, mu=mu, s=s, z=z, iteration=state.iteration + 1,
                     clamped=state.clamped + clamped)


def irls_fit(X, y, lam, steps: int) -> Node:
    """``steps`` unrolled IRLS iterations from ``w = 0``; returns ``w [e, 1]``."""
    if steps < 1:
        raise ValidationError("IRLS needs at least one step")
    X = T.as_node(X)
    state = IrlsState.initial(X.shape[1])
    for _ in range(steps):
        state = irls_step(X, y, state, lam)
    return state.w


def irls_fit_columns(X, Y, lam, steps: int) -> Node:
    """``steps`` IRLS iterations for ``m`` independent binary problems that share
    the inputs ``X``; column ``j`` of ``Y`` (``[n, m]``, entries +-1) labels
    problem ``j``. Returns ``W [e, m]``, column ``j`` equal to
    ``irls_fit(X, Y[:, j], lam, steps)``. ``XXᵀ`` is formed once and every
    step solves all ``m`` weighted systems in one node."""
    if steps < 1:
        raise ValidationError("IRLS needs at least one step")
    X = T.as_node(X)
    n = X.shape[0]
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[0] != n:
        raise DimensionError(f"labels of shape {Y.shape} for {n} samples")
    if not np.all((Y == 1.0) | (Y == -1.0)):
        raise ValidationError("IRLS labels must be -1 or +1")
    t = 0.5 * (Y + 1.0)
    lam = _lambda_node(lam)
    if lam.value.size != 1:
        raise DimensionError("IRLS takes a scalar lambda")
    K = T.gram(X, outer=True)
    W = Node(np.zeros((X.shape[1], Y.shape[1])))
    for _ in range(steps):
        eta = X @ W
        mu = T.sigmoid(eta)
        s = T.clamp_min(mu * (1.0 - mu), S_FLOOR)
        z = eta + (t - mu) / s
        W = X.T @ T.solve_shifted_spd(K, lam / s, z)
    return W


def one_vs_all_fit(X, Y, lam, steps: int) -> Node:
    """One binary IRLS head per class (class rows +1, the rest -1), fitted
    jointly. Returns ``W [e, N]``."""
    Y = np.asarray(Y.value if isinstance(Y, Node) else Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] < 2:
        raise ValidationError("one-vs-all needs at least two classes")
    counts = Y.sum(axis=0)
    if np.any(counts == 0):
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        raise ValidationError(f"classes {missing} have no support rows")
    return irls_fit_columns(X, 2.0 * Y - 1.0, lam, steps)


def one_vs_all_logits(Xq, W: Node) -> Node:
    return T.as_node(Xq) @ W
