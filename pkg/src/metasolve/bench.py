"""Timing and accuracy sweeps behind ``metasolve bench``."""

from __future__ import annotations

import csv
import statistics
import time
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import _kernels
from . import tensor as T
from .config import TrainConfig
from .embed import init_params
from .episodes import (DEFAULT_SPREAD, Dataset, EpisodeSpec, episode_rng, gaussian_task_generator,
                       make_splits, sample_episode)
from .heads import episode_loss
from .solvers import SolverHyperparams, ridge_fit_naive, ridge_fit_woodbury
from .training import evaluate_checkpoint, meta_train

# The seeded desk-scale benchmark used by the acceptance suite and the pilot.
BENCH_CLASSES = 100
BENCH_DATA_SEED = 1
BENCH_MAP_SEED = 2
BENCH_SPLIT_SEED = 0
BENCH_TRAIN = dict(max_episodes=3000, eval_period=500, val_episodes=200)

WOODBURY_DIMS = (128, 256, 512, 1024, 2048, 4096, 8192)
STEP_SET = (1, 2, 5, 10)
REPEATS, WARMUP = 5, 2


def benchmark_dataset(spread: float = DEFAULT_SPREAD) -> Dataset:
    ds = gaussian_task_generator(BENCH_CLASSES, spread=spread, seed=BENCH_DATA_SEED,
                                 nonlinearity_seed=BENCH_MAP_SEED)
    return make_splits(ds, seed=BENCH_SPLIT_SEED)


def benchmark_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**BENCH_TRAIN, **overrides}).validate()


def raw_centroid_accuracy(dataset: Dataset, split="test", spec: EpisodeSpec | None = None,
                          episodes: int = 2000, seed: int = 0) -> float:
    """Nearest-centroid accuracy on the raw inputs, no embedding."""
    spec = spec or EpisodeSpec(5, 1, 15)
    accs = np.empty(episodes)
    for i in range(episodes):
        ep = sample_episode(dataset, split, spec, episode_rng(seed, i))
        centers = (ep.support_y / ep.support_y.sum(axis=0)).T @ ep.support_x
        pred = _kernels.sqdist(ep.query_x, centers).argmin(axis=1)
        accs[i] = np.mean(pred == ep.query_y.argmax(axis=1))
    return float(accs.mean())


def calibrate_spread(target: float = 0.62, lo: float = 0.01, hi: float = 1.0, iters: int = 14,
                     episodes: int = 300) -> float:
    """Geometric bisection on the generator spread for a raw-centroid accuracy."""
    for _ in range(iters):
        mid = float(np.sqrt(lo * hi))
        if raw_centroid_accuracy(benchmark_dataset(mid), episodes=episodes) > target:
            lo = mid
        else:
            hi = mid
    return mid


def median_time(fn: Callable[[], object], repeats: int = REPEATS, warmup: int = WARMUP) -> float:
    """Median wall-clock seconds of ``fn`` after ``warmup`` discarded calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def loglog_slope(x: Iterable[float], y: Iterable[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def bench_woodbury_vs_naive(dims=WOODBURY_DIMS, n: int = 5, o: int = 5, lam: float = 1.0,
                            seed: int = 0, repeats: int = REPEATS, warmup: int = WARMUP) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for e in dims:
        X = rng.standard_normal((n, e)) / np.sqrt(e)
        Y = np.eye(o)[rng.integers(0, o, n)]
        naive = median_time(lambda: ridge_fit_naive(X, Y, lam), repeats, warmup)
        wood = median_time(lambda: ridge_fit_woodbury(X, Y, lam), repeats, warmup)
        rows.append({"e": e, "n": n, "naive_ms": 1000 * naive, "woodbury_ms": 1000 * wood})
    return rows


HEAD_STEPS = {"centroid": 1, "r2d2": 1, "lr-d2-ova": 1, "unrolled-gd": 5}


def bench_heads(head_steps: dict[str, int] | None = None, spec: EpisodeSpec | None = None,
                input_dim: int = 32, widths=(64, 64), seed: int = 0, batch: int = 20,
                repeats: int = REPEATS, warmup: int = WARMUP) -> list[dict]:
    """Per-episode forward + backward time of each head on identical episodes.

    Heads are timed round-robin inside every repeat, so slow drift in machine
    load hits all of them alike; the reported figure is the median.
    """
    head_steps = head_steps or HEAD_STEPS
    spec = spec or EpisodeSpec(5, 1, 15)
    data = make_splits(gaussian_task_generator(40, input_dim=input_dim, seed=seed), seed=seed,
                       min_classes=spec.ways)
    episodes = [sample_episode(data, "train", spec, episode_rng(seed, i)) for i in range(batch)]
    embed = init_params(input_dim, widths, seed)
    hp = SolverHyperparams.create()

    def run(head, steps):
        for ep in episodes:
            T.backward(episode_loss(embed, hp, ep, head, steps)[0])

    times = {head: [] for head in head_steps}
    for rep in range(warmup + repeats):
        for head, steps in head_steps.items():
            t0 = time.perf_counter()
            run(head, steps)
            if rep >= warmup:
                times[head].append(time.perf_counter() - t0)
    return [{"head": head, "steps": steps, "ms_per_episode": 1000 * statistics.median(times[head]) / batch}
            for head, steps in head_steps.items()]


def bench_steps(config: TrainConfig, dataset: Dataset, step_set=STEP_SET,
                heads=("lr-d2", "unrolled-gd"), episodes: int = 2000, seed: int = 0) -> list[dict]:
    """Meta-test accuracy against the number of base-learner steps."""
    rows = []
    for steps in step_set:
        for head in heads:
            cfg = config.replace(head=head, steps=steps)
            ckpt, _ = meta_train(cfg, dataset)
            res = evaluate_checkpoint(ckpt, cfg, dataset, "test", cfg.eval_spec(), episodes, seed)
            rows.append({"head": head, "steps": steps, "accuracy": res.mean, "ci95": res.ci95,
                         "episodes": res.episodes})
    return rows


def bench_kernels(sizes=(5, 10, 25, 50, 100), rhs: int = 5, seed: int = 0,
                  repeats: int = REPEATS, warmup: int = WARMUP) -> list[dict]:
    """numba vs numpy/LAPACK for the factor-and-solve kernel and sqdist."""
    rng = np.random.default_rng(seed)
    rows = []
    for k in sizes:
        X = rng.standard_normal((k, 2 * k))
        A = X @ X.T + np.eye(k)
        B = rng.standard_normal((k, rhs))

        def chol_nb():
            L, _ = _kernels.cholesky_numba(A)
            return _kernels.cho_solve_numba(L, B)

        def chol_np():
            L, _ = _kernels.cholesky_numpy(A)
            return _kernels.cho_solve_numpy(L, B)

        Q = rng.standard_normal((3 * k, 64))
        C = rng.standard_normal((k, 64))
        for name, fnb, fnp in (("cholesky_solve", chol_nb, chol_np),
                               ("sqdist", lambda: _kernels.sqdist_numba(Q, C),
                                lambda: _kernels.sqdist_numpy(Q, C))):
            rows.append({
                "kernel": name,
                "k": k,
                "numba_us": 1e6 * median_time(fnb, repeats, warmup) if _kernels.HAVE_NUMBA else float("nan"),
                "numpy_us": 1e6 * median_time(fnp, repeats, warmup),
            })
    return rows


def write_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
