import csv
import io
import json

import numpy as np
import pytest

from metasolve.checkpoint import load_checkpoint
from metasolve.cli import main
from metasolve.episodes import load_dataset, sidecar_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def data_path(tmp_path_factory):
    p = tmp_path_factory.mktemp("data") / "g.epds"
    assert main(["gen-data", "--classes", "40", "--seed", "1", "--input-dim", "16",
                 "--samples-per-class", "20", "--out", str(p)]) == 0
    return p


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text("widths = [16, 16]\nmax_episodes = 40\neval_period = 20\nval_episodes = 10\nseed = 2\n")
    return p


def metrics_rows(path):
    with open(path, newline="") as fh:
        return [r[:-1] for r in csv.reader(fh)]  # wall_ms dropped


# --- gen-data -----------------------------------------------------------------

def test_gen_data_deterministic(tmp_path, capsys, data_path):
    a, b = tmp_path / "a.epds", tmp_path / "b.epds"
    for p in (a, b):
        code, out, _ = run(capsys, "gen-data", "--classes", 40, "--seed", 1, "--input-dim", 16,
                           "--samples-per-class", 20, "--out", p)
        assert code == 0 and "train=26 val=6 test=8" in out
    assert a.read_bytes() == b.read_bytes() == data_path.read_bytes()
    ds = load_dataset(a)
    assert ds.input_dim == 16 and len(ds.classes) == 40
    assert json.loads(sidecar_path(a).read_text())["generator"] == "gaussian"


def test_gen_data_glyph(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-data", "--generator", "glyph", "--classes", 30, "--flip-noise", 0.2,
                     "--out", tmp_path / "g.epds")
    assert code == 0 and load_dataset(tmp_path / "g.epds").input_dim == 64


def test_gen_data_too_few_classes(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--generator", "glyph", "--classes", 5, "--out", tmp_path / "x.epds")
    assert code == 2 and "split sizes" in err
    assert not (tmp_path / "x.epds").exists()


# --- train ------------------------------------------------------------------------

def test_train_writes_run(tmp_path, capsys, data_path, cfg_path):
    run_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--config", cfg_path, "--data", data_path, "--out", run_dir)
    assert code == 0 and "trained 40 episodes" in out
    rows = metrics_rows(run_dir / "metrics.csv")
    assert rows[0][:2] == ["episode", "split"] and rows[1][:2] == ["1", "train"]
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["status"] == "finished" and manifest["seeds"]["seed"] == 2
    assert json.loads((run_dir / "config.json").read_text())["widths"] == [16, 16]
    assert load_checkpoint(run_dir / "latest.ckpt").episode == 40
    # a second run into the same directory needs --resume or --force
    assert run(capsys, "train", "--config", cfg_path, "--data", data_path, "--out", run_dir)[0] == 2
    assert run(capsys, "train", "--config", cfg_path, "--data", data_path, "--out", run_dir, "--force")[0] == 0
    assert metrics_rows(run_dir / "metrics.csv") == rows


def test_train_rejects_binary_head_with_many_ways(tmp_path, capsys, data_path):
    code, _, err = run(capsys, "train", "--data", data_path, "--out", tmp_path / "r", "--head", "lr-d2",
                       "--ways", 5)
    assert code == 2 and "ways" in err


def test_train_bad_config_field(tmp_path, capsys, data_path):
    p = tmp_path / "bad.toml"
    p.write_text("lr = -1.0\n")
    code, _, err = run(capsys, "train", "--config", p, "--data", data_path, "--out", tmp_path / "r")
    assert code == 2 and "'lr'" in err


def test_train_resume_via_cli(tmp_path, capsys, data_path, cfg_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run(capsys, "train", "--config", cfg_path, "--data", data_path, "--out", full,
               "--episodes", 140)[0] == 0
    assert run(capsys, "train", "--config", cfg_path, "--data", data_path, "--out", part,
               "--episodes", 40)[0] == 0
    assert run(capsys, "train", "--config", cfg_path, "--data", data_path, "--out", part,
               "--episodes", 140, "--resume", part / "latest.ckpt")[0] == 0
    assert metrics_rows(part / "metrics.csv") == metrics_rows(full / "metrics.csv")
    a, b = load_checkpoint(full / "latest.ckpt"), load_checkpoint(part / "latest.ckpt")
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    assert json.loads((part / "manifest.json").read_text())["resumed_from"].endswith("latest.ckpt")


# --- eval -------------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path, capsys, data_path, cfg_path):
    run_dir = tmp_path / "run"
    assert run(capsys, "train", "--config", cfg_path, "--data", data_path, "--out", run_dir)[0] == 0
    return run_dir


def test_eval_deterministic_report(capsys, trained, tmp_path):
    ck = trained / "best.ckpt"
    code, out1, _ = run(capsys, "eval", "--checkpoint", ck, "--episodes", 200, "--seed", 3,
                        "--out", tmp_path / "r.json")
    code2, out2, _ = run(capsys, "eval", "--checkpoint", ck, "--episodes", 200, "--seed", 3)
    assert code == code2 == 0 and out1 == out2 == (tmp_path / "r.json").read_text()
    rep = json.loads(out1)
    assert rep["episodes"] == 200 and rep["spec"] == {"ways": 5, "shots": 1, "queries": 15}
    assert rep["checkpoint"] == "best" and 0.0 <= rep["mean"] <= 1.0 and rep["ci95"] > 0
    other = json.loads(run(capsys, "eval", "--checkpoint", ck, "--episodes", 200, "--seed", 4)[1])
    assert other["mean"] != rep["mean"]


def test_eval_hash_mismatch_needs_force(capsys, trained):
    ck = trained / "latest.ckpt"
    code, _, err = run(capsys, "eval", "--checkpoint", ck, "--episodes", 20, "--head", "centroid")
    assert code == 2 and "--force" in err
    code, out, _ = run(capsys, "eval", "--checkpoint", ck, "--episodes", 20, "--head", "centroid",
                       "--force", "--last")
    assert code == 0 and json.loads(out)["head"] == "centroid"


def test_eval_missing_and_corrupt_files(tmp_path, capsys, trained):
    assert run(capsys, "eval", "--checkpoint", tmp_path / "none.ckpt")[0] == 3
    bad = trained / "bad.ckpt"
    bad.write_bytes(b"MSCK\x02")
    code, _, err = run(capsys, "eval", "--checkpoint", bad)
    assert code == 3 and "offset 4" in err
    assert run(capsys, "train", "--data", tmp_path / "missing.epds", "--out", tmp_path / "r")[0] == 3


# --- gradcheck and bench ------------------------------------------------------------

@pytest.mark.parametrize("argv", [["--head", "r2d2"], ["--head", "lr-d2", "--steps", "3"],
                                  ["--head", "lr-d2", "--ova", "--steps", "2"]])
def test_gradcheck_passes(capsys, argv):
    code, out, _ = run(capsys, "gradcheck", *argv)
    assert code == 0 and out.count(" ok") == 4


def test_gradcheck_catches_corrupt_backward(capsys):
    code, out, err = run(capsys, "gradcheck", "--head", "r2d2", "--corrupt", "solve_spd")
    assert code == 5 and "FAIL" in out and "gradient check failed" in err


def test_bench_steps_rows(tmp_path, capsys, data_path):
    cfg = tmp_path / "b.toml"
    cfg.write_text('head = "lr-d2"\nways = 2\ntrain_ways = 2\nwidths = [8]\nmax_episodes = 10\n'
                   'eval_period = 5\nval_episodes = 4\n')
    code, out, _ = run(capsys, "bench", "--mode", "steps", "--config", cfg, "--data", data_path,
                       "--episodes", 10, "--out", tmp_path / "s.csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 8
    assert {(r["head"], int(r["steps"])) for r in rows} == {(h, t) for h in ("lr-d2", "unrolled-gd")
                                                              for t in (1, 2, 5, 10)}
    assert (tmp_path / "s.csv").read_text() == out


def test_bench_kernels_mode(capsys):
    code, out, _ = run(capsys, "bench", "--mode", "kernels")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and {r["kernel"] for r in rows} == {"cholesky_solve", "sqdist"}
    assert all(float(r["numpy_us"]) > 0 for r in rows)


def test_bench_heads_mode(capsys):
    code, out, _ = run(capsys, "bench", "--mode", "heads")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [r["head"] for r in rows] == ["centroid", "r2d2", "lr-d2-ova", "unrolled-gd"]
