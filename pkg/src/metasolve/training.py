"""Outer meta-learning loop, evaluation and the pretrain-then-adapt baseline."""

from __future__ import annotations

import csv
import logging
import math
import os
import signal
import threading
import time
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, model_params, save_checkpoint
from .config import TrainConfig, config_hash
from .embed import EmbeddingParams, forward, init_params
from .episodes import Dataset, EpisodeSpec, check_dataset, episode_rng, sample_episode
from .errors import NumericalError, ValidationError
from .heads import episode_loss
from .optim import AdamState, adam_step, clip_by_global_norm, lr_at
from .solvers import SolverHyperparams

log = logging.getLogger(__name__)

# rng streams derived from one seed
STREAM_TRAIN, STREAM_VAL, STREAM_EVAL, STREAM_PRETRAIN = 0, 1, 2, 3

METRICS_HEADER = ["episode", "split", "loss", "accuracy", "lambda", "alpha", "beta", "lr", "wall_ms"]


@dataclass
class MetricsRecord:
    episode: int
    split: str
    loss: float
    accuracy: float
    lam: float
    alpha: float
    beta: float
    lr: float
    wall_ms: float

    def row(self) -> list[str]:
        return [str(self.episode), self.split, repr(float(self.loss)), repr(float(self.accuracy)),
                repr(float(self.lam)), repr(float(self.alpha)), repr(float(self.beta)),
                repr(float(self.lr)), f"{self.wall_ms:.3f}"]


class MetricsWriter:
    """Appends records to a CSV file, flushing after every row."""

    def __init__(self, path):
        self.path = Path(path)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if fresh:
            self._w.writerow(METRICS_HEADER)

    def write(self, rec: MetricsRecord) -> None:
        self._w.writerow(rec.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class EvalResult:
    mean: float
    ci95: float
    accuracies: np.ndarray
    mean_loss: float

    @property
    def episodes(self) -> int:
        return int(self.accuracies.size)


def confidence95(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return float(1.96 * np.std(values, ddof=1) / math.sqrt(values.size))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("METASOLVE_THREADS", "1")))
    except ValueError:
        raise ValidationError("METASOLVE_THREADS must be an integer") from None


def build_model(config: TrainConfig, input_dim: int) -> tuple[EmbeddingParams, SolverHyperparams]:
    embed = init_params(input_dim, config.widths, config.seed, config.dropout, config.concat_last_two)
    hp = SolverHyperparams.create(
        config.lambda_init, config.alpha_init, config.beta_init,
        dim=embed.output_dim if config.diag_lambda else None,
        learn_lambda=config.learn_lambda, learn_alpha=config.learn_alpha,
        learn_beta=config.learn_beta,
    )
    return embed, hp


def restore_model(ckpt: Checkpoint, config: TrainConfig, best: bool = True):
    embed = ckpt.embed_params(config.dropout, config.concat_last_two, best=best)
    hp = ckpt.solver_hp(config.learn_lambda, config.learn_alpha, config.learn_beta, best=best)
    return embed, hp


def evaluate(embed: EmbeddingParams, hp: SolverHyperparams, dataset: Dataset, split,
             spec: EpisodeSpec, episodes: int = 10000, seed: int = 0, head: str = "r2d2",
             steps: int = 5, inner_lr: float = 0.01, stream: int = STREAM_EVAL,
             workers: int | None = None) -> EvalResult:
    """Mean query accuracy over ``episodes`` episodes with a 95% interval.

    Dropout is off. Episode ``i`` draws from its own generator, so results do
    not depend on the worker count.
    """
    if episodes < 2:
        raise ValidationError("evaluation needs at least 2 episodes")
    check_dataset(dataset, split, spec)

    def one(i: int) -> tuple[float, float]:
        ep = sample_episode(dataset, split, spec, episode_rng(seed, i, stream))
        loss, acc = episode_loss(embed, hp, ep, head, steps, inner_lr, train=False)
        return float(loss.value), acc

    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(episodes)))
    else:
        results = [one(i) for i in range(episodes)]
    losses = np.array([r[0] for r in results])
    accs = np.array([r[1] for r in results])
    return EvalResult(float(accs.mean()), confidence95(accs), accs, float(losses.mean()))


def evaluate_checkpoint(ckpt: Checkpoint, config: TrainConfig, dataset: Dataset, split="test",
                        spec: EpisodeSpec | None = None, episodes: int = 10000, seed: int = 0,
                        best: bool = True) -> EvalResult:
    embed, hp = restore_model(ckpt, config, best=best)
    return evaluate(embed, hp, dataset, split, spec or config.eval_spec(), episodes, seed,
                    config.head, config.steps, config.inner_lr)


@contextmanager
def _deferred_interrupt():
    """Turn the first SIGINT into a flag checked between episodes, so the
    saved state is never half-updated. A second SIGINT interrupts at once."""
    flag = {"set": False}
    if threading.current_thread() is not threading.main_thread():
        yield flag
        return
    previous = signal.getsignal(signal.SIGINT)

    def handler(signum, frame):
        flag["set"] = True
        signal.signal(signal.SIGINT, previous)

    signal.signal(signal.SIGINT, handler)
    try:
        yield flag
    finally:
        signal.signal(signal.SIGINT, previous)


def _snapshot(embed, hp) -> dict[str, np.ndarray]:
    return {k: v.value.copy() for k, v in model_params(embed, hp).items()}


def meta_train(config: TrainConfig, dataset: Dataset, *, out_dir=None,
               resume: Checkpoint | str | Path | None = None,
               on_record: Callable[[MetricsRecord], None] | None = None
               ) -> tuple[Checkpoint, list[MetricsRecord]]:
    """Train the embedding and the learnable solver hyper-parameters.

    Returns the final checkpoint (which also carries the best-on-validation
    snapshot under ``best.*``) and the metrics records emitted by this call.
    With ``out_dir`` set, ``metrics.csv``, ``latest.ckpt`` and ``best.ckpt``
    are written there.
    """
    config.validate()
    train_spec, eval_spec = config.train_spec(), config.eval_spec()
    check_dataset(dataset, "train", train_spec)
    check_dataset(dataset, "val", eval_spec)
    chash = config_hash(config)

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ckpt.config_hash != chash:
            raise ValidationError("resume checkpoint was written with a different config")
        embed, hp = restore_model(ckpt, config, best=False)
        adam = ckpt.adam_state()
        episode, best_val, best_episode = ckpt.episode, ckpt.best_val, ckpt.best_episode
        best = ckpt.best_snapshot()
    else:
        embed, hp = build_model(config, dataset.input_dim)
        if embed.input_dim != dataset.input_dim:
            raise ValidationError("embedding input dim does not match the dataset")
        episode, best_val, best_episode = 0, math.inf, 0
        best = _snapshot(embed, hp)
        adam = None

    params = dict(embed.named())
    params.update({f"solver.{k}": v for k, v in hp.parameters().items()})
    if adam is None:
        adam = AdamState.for_params(params)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.csv") if out is not None else None
    records: list[MetricsRecord] = []

    def emit(rec: MetricsRecord) -> None:
        records.append(rec)
        if writer is not None:
            writer.write(rec)
        if on_record is not None:
            on_record(rec)

    def capture() -> Checkpoint:
        return Checkpoint.capture(embed, hp, adam, episode=episode, best_val=best_val,
                                  best_episode=best_episode, seed=config.seed, best=best,
                                  config_hash=chash)

    completed = episode
    with _deferred_interrupt() as interrupted:
        try:
            while episode < config.max_episodes:
                if interrupted["set"]:
                    raise KeyboardInterrupt
                episode += 1
                t0 = time.perf_counter()
                rng = episode_rng(config.seed, episode, STREAM_TRAIN)
                ep = sample_episode(dataset, "train", train_spec, rng)
                loss, acc = episode_loss(embed, hp, ep, config.head, config.steps, config.inner_lr,
                                         train=True, rng=rng)
                if not np.isfinite(loss.value):
                    raise NumericalError(f"non-finite training loss at episode {episode}")
                leaf_grads = T.backward(loss)
                grads = {k: leaf_grads.get(p) for k, p in params.items()}
                if config.grad_clip is not None:
                    grads = clip_by_global_norm(grads, config.grad_clip)
                lr = lr_at(config.lr, config.lr_decay, config.lr_period, episode - 1)
                adam_step(params, grads, adam, lr, config.beta1, config.beta2, config.adam_eps)
                completed = episode
                emit(MetricsRecord(episode, "train", float(loss.value), acc, hp.lambda_value(),
                                   float(hp.alpha.value), float(hp.beta.value), lr,
                                   1000.0 * (time.perf_counter() - t0)))

                if episode % config.eval_period == 0:
                    t0 = time.perf_counter()
                    res = evaluate(embed, hp, dataset, "val", eval_spec, config.val_episodes,
                                   config.seed, config.head, config.steps, config.inner_lr,
                                   stream=STREAM_VAL)
                    emit(MetricsRecord(episode, "val", res.mean_loss, res.mean, hp.lambda_value(),
                                       float(hp.alpha.value), float(hp.beta.value), lr,
                                       1000.0 * (time.perf_counter() - t0)))
                    metric = res.mean_loss if config.stop_metric == "loss" else -res.mean
                    if metric < best_val - config.min_delta:
                        best_val, best_episode = metric, episode
                        best = _snapshot(embed, hp)
                        if out is not None:
                            save_checkpoint(capture(), out / "best.ckpt")
                    if out is not None:
                        save_checkpoint(capture(), out / "latest.ckpt")
                    if episode - best_episode >= config.patience:
                        log.info("early stop at episode %d (best %d)", episode, best_episode)
                        break
        except KeyboardInterrupt:
            # only a consistent state is saved; otherwise the last periodic
            # latest.ckpt stays in place
            if out is not None and completed == episode:
                save_checkpoint(capture(), out / "latest.ckpt")
            raise
        finally:
            if writer is not None:
                writer.close()

    final = capture()
    if out is not None:
        save_checkpoint(final, out / "latest.ckpt")
        if not (out / "best.ckpt").exists():
            save_checkpoint(final, out / "best.ckpt")
    return final, records


# ---------------------------------------------------------------------------
# pretrain-then-adapt transfer baseline

def pretrain_embedding(config: TrainConfig, dataset: Dataset, steps: int | None = None
                       ) -> tuple[EmbeddingParams, float]:
    """Train the embedding plus a linear classifier over all meta-train classes
    with plain cross-entropy. Returns the embedding and its training accuracy."""
    steps = config.pretrain_steps if steps is None else steps
    ids = dataset.class_ids("train")
    if len(ids) < 2:
        raise ValidationError("pretraining needs at least two meta-train classes")
    X = np.vstack([dataset.classes[c] for c in ids])
    labels = np.concatenate([np.full(dataset.classes[c].shape[0], i) for i, c in enumerate(ids)])
    onehot = np.eye(len(ids))[labels]

    embed, _ = build_model(config, dataset.input_dim)
    rng0 = np.random.default_rng([config.seed, STREAM_PRETRAIN])
    e, C = embed.output_dim, len(ids)
    a = math.sqrt(6.0 / (e + C))
    W = T.Node(rng0.uniform(-a, a, (e, C)), True, name="clf.w")
    b = T.Node(np.zeros(C), True, name="clf.b")
    params = dict(embed.named())
    params.update({"clf.w": W, "clf.b": b})
    adam = AdamState.for_params(params)
    for step in range(1, steps + 1):
        rng = episode_rng(config.seed, step, STREAM_PRETRAIN)
        idx = rng.choice(X.shape[0], size=min(config.pretrain_batch, X.shape[0]), replace=False)
        logits = forward(embed, X[idx], train=True, rng=rng) @ W + b
        loss = T.softmax_cross_entropy(logits, onehot[idx])
        leaf_grads = T.backward(loss)
        grads = {k: leaf_grads.get(p) for k, p in params.items()}
        if config.grad_clip is not None:
            grads = clip_by_global_norm(grads, config.grad_clip)
        adam_step(params, grads, adam, lr_at(config.lr, config.lr_decay, config.lr_period, step - 1),
                  config.beta1, config.beta2, config.adam_eps)
    logits = forward(embed, X) @ W + b
    acc = float(np.mean(logits.value.argmax(axis=1) == labels))
    return embed, acc


def pretrain_transfer_baseline(config: TrainConfig, dataset: Dataset, *, episodes: int = 10000,
                               seed: int = 0, split="test", steps: int | None = None,
                               reference: EvalResult | None = None) -> dict:
    """Pretrain on all meta-train classes, freeze, then evaluate the ridge head.

    Stops with :class:`NumericalError` if stage-1 training accuracy is not at
    least five times chance.
    """
    embed, train_acc = pretrain_embedding(config, dataset, steps)
    chance = 1.0 / len(dataset.class_ids("train"))
    if train_acc < 5.0 * chance:
        raise NumericalError(
            f"pretraining reached {train_acc:.3f} accuracy, below 5x chance ({5 * chance:.3f})"
        )
    hp = SolverHyperparams.create(config.lambda_init, 1.0, 0.0, learn_lambda=False,
                                  learn_alpha=False, learn_beta=False)
    res = evaluate(embed, hp, dataset, split, config.eval_spec(), episodes, seed, "r2d2")
    report = {
        "stage1_train_accuracy": train_acc,
        "stage1_chance": chance,
        "mean": res.mean,
        "ci95": res.ci95,
        "episodes": res.episodes,
    }
    if reference is not None:
        report["reference_mean"] = reference.mean
        report["reference_ci95"] = reference.ci95
        report["gap"] = reference.mean - res.mean
    return report
