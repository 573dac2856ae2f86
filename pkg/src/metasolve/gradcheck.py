"""Finite-difference checks of the full episode loss, per parameter group."""

from __future__ import annotations

import numpy as np

from .embed import init_params
from .episodes import EpisodeSpec, episode_rng, gaussian_task_generator, make_splits, sample_episode
from .heads import episode_loss
from .solvers import SolverHyperparams
from .tensor import grad_check

TOLERANCE = 1e-4
GROUPS = ("omega", "lambda_raw", "alpha", "beta")


def gradcheck_episode_loss(head: str = "r2d2", steps: int = 3, seed: int = 0,
                           eps: float = 1e-5, ways: int | None = None) -> dict[str, float]:
    """Max relative gradient error of a seeded small episode loss for each of
    the embedding weights, ``lambda_raw``, ``alpha`` and ``beta``."""
    if ways is None:
        ways = 2 if head == "lr-d2" else 3
    data = make_splits(
        gaussian_task_generator(20, input_dim=6, spread=0.3, nonlinearity_seed=seed, seed=seed,
                                samples_per_class=8, latent_dim=4, nuisance_dim=2),
        seed=seed, min_classes=ways,
    )
    episode = sample_episode(data, "train", EpisodeSpec(ways, 2, 2), episode_rng(seed, 0))
    embed = init_params(6, [5, 4], seed)
    rng = np.random.default_rng(seed)
    hp = SolverHyperparams.create(0.7, 1.0 + rng.uniform(), 0.1 * rng.standard_normal())

    def f():
        return episode_loss(embed, hp, episode, head, steps)[0]

    leaves = {
        "omega": list(embed.named().values()),
        "lambda_raw": [hp.lambda_raw],
        "alpha": [hp.alpha],
        "beta": [hp.beta],
    }
    return {group: grad_check(f, nodes, eps) for group, nodes in leaves.items()}
