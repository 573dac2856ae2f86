"""Per-episode heads and the episode loss.

``r2d2`` is calibrated ridge regression, ``lr-d2`` binary IRLS logistic
regression, ``lr-d2-ova`` its one-vs-all multiclass form. ``centroid`` and
``unrolled-gd`` are the comparison heads: nearest class mean, and a linear
layer adapted by a few plain gradient steps from zero.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .embed import EmbeddingParams, forward
from .episodes import Episode
from .errors import ValidationError
from .solvers import (
    SolverHyperparams,
    calibrate,
    irls_fit,
    one_vs_all_fit,
    one_vs_all_logits,
    ridge_fit,
)
from .tensor import Node

HEADS = ("r2d2", "lr-d2", "lr-d2-ova", "centroid", "unrolled-gd")


def centroid_head(support, labels, query) -> Node:
    """Logits are negative squared distances to the class-mean embeddings."""
    labels = np.asarray(labels, dtype=np.float64)
    counts = labels.sum(axis=0)
    if np.any(counts == 0):
        raise ValidationError("every class needs at least one support row")
    centers = (labels / counts).T @ T.as_node(support)
    return -T.sqdist(query, centers)


def unrolled_gd_head(support, labels, query, steps: int, inner_lr: float = 0.01) -> Node:
    """Fit ``W`` (from zero) by ``steps`` gradient steps on the support
    cross-entropy, keeping every step in the graph."""
    if steps < 1:
        raise ValidationError("unrolled-gd needs steps >= 1")
    support = T.as_node(support)
    labels = np.asarray(labels, dtype=np.float64)
    n = support.shape[0]
    W = Node(np.zeros((support.shape[1], labels.shape[1])))
    for _ in range(steps):
        resid = T.softmax(support @ W) - labels
        W = W - T.scale(support.T @ resid, inner_lr / n)
    return T.as_node(query) @ W


def head_logits(head: str, Xs: Node, Ys: np.ndarray, Xq: Node, hp: SolverHyperparams,
                steps: int = 5, inner_lr: float = 0.01) -> Node:
    if head == "r2d2":
        return calibrate(Xq, ridge_fit(Xs, Ys, hp), hp)
    if head == "lr-d2":
        if Ys.shape[1] != 2:
            raise ValidationError(
                f"lr-d2 is binary but the episode has {Ys.shape[1]} ways; use lr-d2-ova"
            )
        w = irls_fit(Xs, 2.0 * Ys[:, 1] - 1.0, hp.lam, steps)
        return calibrate(Xq, w, hp)
    if head == "lr-d2-ova":
        W = one_vs_all_fit(Xs, Ys, hp.lam, steps)
        return hp.alpha * one_vs_all_logits(Xq, W) + hp.beta
    if head == "centroid":
        return centroid_head(Xs, Ys, Xq)
    if head == "unrolled-gd":
        return unrolled_gd_head(Xs, Ys, Xq, steps, inner_lr)
    raise ValidationError(f"unknown head {head!r}")


def episode_loss(embed: EmbeddingParams, hp: SolverHyperparams, episode: Episode,
                 head: str = "r2d2", steps: int = 5, inner_lr: float = 0.01,
                 train: bool = False, rng: np.random.Generator | None = None
                 ) -> tuple[Node, float]:
    """Query loss and accuracy of ``head`` fitted on the episode's support set.

    Support and query rows go through the embedding in a single pass. The
    binary ``lr-d2`` head treats episode class 1 as the positive class and
    scores queries with binary cross-entropy; every other head uses softmax
    cross-entropy over the episode's classes.
    """
    ns = episode.support_x.shape[0]
    feats = forward(embed, np.vstack([episode.support_x, episode.query_x]), train=train, rng=rng)
    Xs, Xq = feats[:ns], feats[ns:]
    Yq = episode.query_y
    logits = head_logits(head, Xs, episode.support_y, Xq, hp, steps, inner_lr)
    if head == "lr-d2":
        positive = Yq[:, 1]
        loss = T.binary_cross_entropy_with_logits(logits, positive)
        acc = float(np.mean((logits.value[:, 0] > 0) == (positive == 1.0)))
        return loss, acc
    loss = T.softmax_cross_entropy(logits, Yq)
    acc = float(np.mean(logits.value.argmax(axis=1) == Yq.argmax(axis=1)))
    return loss, acc
