"""``metasolve`` command line: gen-data, train, eval, gradcheck, bench.

Exit codes: 0 success, 2 validation or config error, 3 I/O or format error,
4 numerical failure, 5 gradcheck failure, 130 interrupted.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, bench
from . import tensor as T
from .checkpoint import load_checkpoint
from .config import TrainConfig, config_hash, load_config
from .episodes import (DEFAULT_FRACTIONS, DEFAULT_SPREAD, gaussian_task_generator, glyph_task_generator,
                       load_dataset, make_splits, save_dataset)
from .errors import GradcheckError, MetasolveError, ValidationError
from .gradcheck import TOLERANCE, gradcheck_episode_loss
from .heads import HEADS
from .training import STREAM_EVAL, STREAM_TRAIN, STREAM_VAL, evaluate_checkpoint, meta_train

log = logging.getLogger("metasolve")

MANIFEST = "manifest.json"
CONFIG_SNAPSHOT = "config.json"
BENCH_MODES = ("woodbury-vs-naive", "heads", "steps", "kernels")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    git: str
    started: str
    seeds: dict
    paths: dict
    finished: str | None = None
    status: str = "running"
    extra: dict = field(default_factory=dict)

    def write(self, run_dir: Path) -> None:
        """Config snapshot first, then the manifest, each via rename."""
        _atomic_write(run_dir / CONFIG_SNAPSHOT,
                      json.dumps(self.config, indent=2, sort_keys=True) + "\n")
        body = {k: v for k, v in self.__dict__.items() if k != "extra"}
        body.update(self.extra)
        _atomic_write(run_dir / MANIFEST, json.dumps(body, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared flag handling

def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--head", choices=HEADS)
    p.add_argument("--ways", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--steps", type=int, help="base-learner steps (IRLS or unrolled GD)")
    p.add_argument("--ova", action="store_true", help="one-vs-all logistic head for N > 2")


def _apply_overrides(cfg: TrainConfig, args, keys=("head", "ways", "shots", "queries", "steps", "seed")
                     ) -> TrainConfig:
    changes = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if getattr(args, "ova", False):
        changes["ova"] = True
    if getattr(args, "episodes", None) is not None and args.command == "train":
        changes["max_episodes"] = args.episodes
    if getattr(args, "data", None) is not None:
        changes["data"] = str(args.data)
    return cfg.replace(**changes).validate() if changes else cfg.validate()


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    if args.generator == "gaussian":
        kw = {"input_dim": args.input_dim, "spread": args.spread,
              "nonlinearity_seed": args.nonlinearity_seed, "seed": args.seed}
        if args.samples_per_class is not None:
            kw["samples_per_class"] = args.samples_per_class
        ds = gaussian_task_generator(args.classes, **kw)
    else:
        kw = {"grid_size": args.grid_size, "flip_noise": args.flip_noise, "seed": args.seed}
        if args.samples_per_class is not None:
            kw["samples_per_class"] = args.samples_per_class
        ds = glyph_task_generator(args.classes, **kw)
    ds = make_splits(ds, DEFAULT_FRACTIONS, seed=args.seed, min_classes=args.min_classes)
    names = {cid: f"{args.generator}-{cid:04d}" for cid in ds.classes}
    meta = {"generator": args.generator, "classes_total": args.classes, "params": kw}
    save_dataset(ds, args.out, names=names, meta=meta)
    tr, va, te = ds.split_counts()
    print(f"wrote {args.out}: {len(ds.classes)} classes, input dim {ds.input_dim}; "
          f"splits train={tr} val={va} test={te}")
    return 0


def _truncate_metrics(path: Path, episode: int) -> None:
    """Drop rows past ``episode`` so a resumed run appends a clean stream."""
    if not path.exists():
        return
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kept = [rows[0]] + [r for r in rows[1:] if r and int(r[0]) <= episode]
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(kept)
    tmp.replace(path)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg = _apply_overrides(cfg, args)
    if cfg.data is None:
        raise ValidationError("no dataset: pass --data or set 'data' in the config")
    dataset = load_dataset(cfg.data)

    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        _truncate_metrics(run / "metrics.csv", resume.episode)
    elif (run / MANIFEST).exists() or (run / "metrics.csv").exists():
        if not args.force:
            raise ValidationError(f"{run} already holds a run; use --resume or --force")
        for name in ("metrics.csv", "latest.ckpt", "best.ckpt"):
            (run / name).unlink(missing_ok=True)

    manifest = RunManifest(
        config=cfg.to_dict(),
        config_hash=f"{config_hash(cfg):016x}",
        git=git_describe(),
        started=_now(),
        seeds={"seed": cfg.seed, "streams": {"train": STREAM_TRAIN, "val": STREAM_VAL,
                                             "eval": STREAM_EVAL}},
        paths={"data": str(cfg.data), "metrics": str(run / "metrics.csv"),
               "latest": str(run / "latest.ckpt"), "best": str(run / "best.ckpt")},
        extra={"resumed_from": str(args.resume) if args.resume else None, "version": __version__},
    )
    manifest.write(run)
    try:
        final, records = meta_train(cfg, dataset, out_dir=run, resume=resume)
    except KeyboardInterrupt:
        manifest.status, manifest.finished = "interrupted", _now()
        manifest.write(run)
        raise
    except MetasolveError:
        manifest.status, manifest.finished = "failed", _now()
        manifest.write(run)
        raise
    manifest.status, manifest.finished = "finished", _now()
    manifest.extra.update({"episodes_done": final.episode, "best_episode": final.best_episode})
    manifest.write(run)
    val = [r for r in records if r.split == "val"]
    summary = f"trained {final.episode} episodes; best at {final.best_episode}"
    if val:
        summary += f"; last val accuracy {val[-1].accuracy:.4f}"
    print(summary)
    return 0


def _eval_config(args) -> TrainConfig:
    if args.config:
        return load_config(args.config)
    snap = Path(args.checkpoint).resolve().parent / CONFIG_SNAPSHOT
    if not snap.exists():
        raise ValidationError(f"no --config given and no {CONFIG_SNAPSHOT} next to the checkpoint")
    try:
        return TrainConfig.from_dict(json.loads(snap.read_text()))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cannot parse {snap}: {exc}") from None


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    # --seed selects the evaluation episodes, not the trained model
    cfg = _apply_overrides(_eval_config(args), args, ("head", "ways", "shots", "queries", "steps"))
    if config_hash(cfg) != ckpt.config_hash and not args.force:
        raise ValidationError(
            f"config hash {config_hash(cfg):016x} does not match the checkpoint's "
            f"{ckpt.config_hash:016x}; pass --force to evaluate anyway"
        )
    if cfg.data is None:
        raise ValidationError("no dataset: pass --data or set 'data' in the config")
    dataset = load_dataset(cfg.data)
    spec = cfg.eval_spec()
    res = evaluate_checkpoint(ckpt, cfg, dataset, args.split, spec, args.episodes, args.seed,
                              best=not args.last)
    report = {
        "mean": res.mean,
        "ci95": res.ci95,
        "episodes": res.episodes,
        "spec": {"ways": spec.ways, "shots": spec.shots, "queries": spec.queries},
        "head": cfg.head,
        "split": args.split,
        "seed": args.seed,
        "checkpoint": "latest" if args.last else "best",
        "config_hash": f"{config_hash(cfg):016x}",
    }
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _atomic_write(Path(args.out), text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    head = "lr-d2-ova" if args.ova and args.head == "lr-d2" else args.head
    if args.corrupt:
        with T.corrupt_backward(*args.corrupt):
            errs = gradcheck_episode_loss(head, args.steps, args.seed, ways=args.ways)
    else:
        errs = gradcheck_episode_loss(head, args.steps, args.seed, ways=args.ways)
    print(f"{'group':<12} {'max_rel_err':>12}  status")
    for group, err in errs.items():
        print(f"{group:<12} {err:>12.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    bad = [g for g, e in errs.items() if not e < TOLERANCE]
    if bad:
        raise GradcheckError(f"gradient check failed for {', '.join(bad)} (tolerance {TOLERANCE:g})")
    return 0


def cmd_bench(args) -> int:
    if args.mode == "woodbury-vs-naive":
        rows = bench.bench_woodbury_vs_naive(seed=args.seed)
    elif args.mode == "heads":
        rows = bench.bench_heads(seed=args.seed)
    elif args.mode == "kernels":
        rows = bench.bench_kernels(seed=args.seed)
    else:
        cfg = load_config(args.config) if args.config else bench.benchmark_config(ways=2, train_ways=2)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        data = args.data or cfg.data
        dataset = load_dataset(data) if data else bench.benchmark_dataset()
        rows = bench.bench_steps(cfg, dataset, episodes=args.episodes, seed=cfg.seed)
    if args.out:
        bench.write_csv(rows, args.out)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="metasolve", description="Few-shot meta-learning with differentiable closed-form solvers.")
    ap.add_argument("--version", action="version", version=f"metasolve {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic EPDS dataset")
    g.add_argument("--generator", choices=("gaussian", "glyph"), default="gaussian")
    g.add_argument("--classes", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--spread", type=float, default=DEFAULT_SPREAD)
    g.add_argument("--input-dim", type=int, default=32)
    g.add_argument("--nonlinearity-seed", type=int, default=0)
    g.add_argument("--samples-per-class", type=int)
    g.add_argument("--grid-size", type=int, default=8)
    g.add_argument("--flip-noise", type=float, default=0.1)
    g.add_argument("--min-classes", type=int, default=5,
                   help="smallest allowed class count per split")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="meta-train a model into a run directory")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--episodes", type=int, help="maximum training episodes")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true", help="overwrite an existing run")
    _add_spec_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on meta-test episodes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--data")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--episodes", type=int, default=10000)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--last", action="store_true", help="use the latest weights, not the best")
    e.add_argument("--force", action="store_true", help="ignore a config-hash mismatch")
    e.add_argument("--out", help="also write the JSON report here")
    _add_spec_flags(e)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the episode loss")
    c.add_argument("--head", choices=HEADS, default="r2d2")
    c.add_argument("--steps", type=int, default=3)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--ways", type=int)
    c.add_argument("--ova", action="store_true")
    c.add_argument("--corrupt", action="append", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="timing and accuracy sweeps as CSV")
    b.add_argument("--mode", choices=BENCH_MODES, required=True)
    b.add_argument("--out")
    b.add_argument("--seed", type=int)
    b.add_argument("--config", help="steps mode: training config")
    b.add_argument("--data", help="steps mode: dataset (default: built-in benchmark)")
    b.add_argument("--episodes", type=int, default=2000, help="steps mode: meta-test episodes")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench" and args.seed is None and args.mode != "steps":
        args.seed = 0
    try:
        return args.func(args)
    except MetasolveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
