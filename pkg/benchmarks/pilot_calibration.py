"""Calibrate the Gaussian benchmark and record pilot accuracies.

Writes ``tests/fixtures/pilot.json``. The acceptance suite reads the spread
from it and compares its own runs against the recorded accuracies.

    python benchmarks/pilot_calibration.py [--episodes 2000]
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from metasolve.bench import (BENCH_TRAIN, benchmark_config, benchmark_dataset, calibrate_spread,
                             raw_centroid_accuracy)
from metasolve.training import build_model, evaluate, evaluate_checkpoint, meta_train, pretrain_transfer_baseline

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "pilot.json"


def acc(res) -> dict:
    return {"mean": round(res.mean, 6), "ci95": round(res.ci95, 6)}


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--target", type=float, default=0.62)
    args = ap.parse_args()
    M = args.episodes

    spread = round(calibrate_spread(args.target), 2)
    ds = benchmark_dataset(spread)
    out = {"spread": spread, "raw_centroid": round(raw_centroid_accuracy(ds, episodes=M), 6),
           "episodes": M, "train": BENCH_TRAIN}

    cfg = benchmark_config()
    ckpt, _ = meta_train(cfg, ds)
    out["r2d2"] = acc(evaluate_checkpoint(ckpt, cfg, ds, episodes=M))
    embed, hp = build_model(cfg, ds.input_dim)
    out["r2d2_random_embedding"] = acc(evaluate(embed, hp, ds, "test", cfg.eval_spec(), M))
    pre = pretrain_transfer_baseline(cfg, ds, episodes=M)
    out["pretrain_transfer"] = {"mean": round(pre["mean"], 6), "ci95": round(pre["ci95"], 6),
                                "stage1_train_accuracy": round(pre["stage1_train_accuracy"], 6)}
    for name, flag in (("alpha_frozen", "learn_alpha"), ("lambda_frozen", "learn_lambda")):
        c = benchmark_config(**{flag: False})
        out[name] = acc(evaluate_checkpoint(meta_train(c, ds)[0], c, ds, episodes=M))

    steps = {}
    for head in ("lr-d2", "unrolled-gd"):
        for t in (1, 2, 5, 10):
            c = benchmark_config(head=head, ways=2, train_ways=2, steps=t)
            steps[f"{head}@{t}"] = acc(evaluate_checkpoint(meta_train(c, ds)[0], c, ds, episodes=M))
            print(head, t, steps[f"{head}@{t}"], flush=True)
    out["binary_steps"] = steps

    FIXTURE.parent.mkdir(parents=True, exist_ok=True)
    FIXTURE.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    print(json.dumps(out, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
