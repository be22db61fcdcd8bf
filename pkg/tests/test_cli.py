import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from gridmix.cli import main
from gridmix.config import RunConfig, from_dict
from gridmix.data import write_tracks_csv
from gridmix.features import Track
from gridmix.network import ModelConfig, TrainState, init_params, save_checkpoint

TOY = str(Path(__file__).parents[1] / "configs" / "toy.json")


def tree_hashes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("--config", TOY, "--seed", 3, "--out", root / "data", "datagen", "--n-tracks", 12) == 0
    assert run("--config", TOY, "--out", root / "run", "train", "--dataset", root / "data", "--epochs", 2) == 0
    return root


def test_datagen_manifest(workspace, capsys):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(manifest["items"]) == 12
    assert manifest["scenario_config"]["seed"] == 3
    assert sum(e["split"] == "test" for e in manifest["items"]) == 2


def test_datagen_default_track_count():
    assert RunConfig().scenario.n_tracks == 2500


def test_datagen_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("--seed", 9, "--out", tmp_path / name, "datagen", "--n-tracks", 5) == 0
    assert run("--seed", 10, "--out", tmp_path / "c", "datagen", "--n-tracks", 5) == 0
    assert tree_hashes(tmp_path / "a") == tree_hashes(tmp_path / "b")
    assert tree_hashes(tmp_path / "a") != tree_hashes(tmp_path / "c")


def test_datagen_invalid_config(tmp_path, capsys):
    assert run("--set", "scenario.fraction_straight=1.5", "--out", tmp_path, "datagen") != 0
    assert "fraction_straight" in capsys.readouterr().err


def test_train_outputs(workspace):
    rows = list(csv.DictReader((workspace / "run" / "loss.csv").open()))
    assert list(rows[0]) == ["epoch", "classification", "regression", "total"]
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    for r in rows:
        assert float(r["total"]) == pytest.approx(float(r["classification"]) + float(r["regression"]))
    cfg = from_dict(json.loads((workspace / "run" / "config.json").read_text()))
    assert cfg.model.grid_n == 4


def test_train_reproducible(workspace, tmp_path):
    assert run("--config", TOY, "--out", tmp_path, "train", "--dataset", workspace / "data", "--epochs", 2) == 0
    assert tree_hashes(tmp_path) == tree_hashes(workspace / "run")


def test_train_resume_continues_curve(workspace, tmp_path):
    ds = workspace / "data"
    assert run("--config", TOY, "--out", tmp_path / "full", "train", "--dataset", ds, "--epochs", 4) == 0
    assert run("--config", TOY, "--out", tmp_path / "half", "train", "--dataset", ds,
               "--resume", workspace / "run" / "checkpoint.npz", "--epochs", 2) == 0
    full = list(csv.DictReader((tmp_path / "full" / "loss.csv").open()))
    resumed = list(csv.DictReader((tmp_path / "half" / "loss.csv").open()))
    assert [r["epoch"] for r in resumed] == ["1", "2", "3", "4"]
    for a, b in zip(full, resumed):
        assert float(b["total"]) == pytest.approx(float(a["total"]), rel=1e-5)
    assert float(resumed[2]["total"]) <= 1.1 * float(resumed[1]["total"])


def test_train_missing_dataset(tmp_path, capsys):
    assert run("--out", tmp_path, "train", "--dataset", tmp_path / "nowhere") == 1
    assert "nowhere" in capsys.readouterr().err


def _eval(workspace, out, *extra):
    code = run("--config", TOY, "--out", out, "eval", "--checkpoint", workspace / "run" / "checkpoint.npz",
               "--dataset", workspace / "data", *extra)
    assert code == 0
    return json.loads((out / "eval.json").read_text())


def test_eval_report(workspace, tmp_path):
    r = _eval(workspace, tmp_path / "a", "--sigma-v", "0.46")
    assert set(r) == {"ade", "min_ade", "fde", "k_used", "sigma_v", "corrected", "samples_evaluated",
                      "samples_skipped_out_of_extent"}
    assert r["min_ade"] <= r["ade"] and r["k_used"] == 3
    assert r["corrected"]["ade"] == pytest.approx((r["ade"] ** 2 - 0.46**2) ** 0.5)
    one = _eval(workspace, tmp_path / "b", "--k", "1")
    assert one["min_ade"] == one["ade"]
    again = _eval(workspace, tmp_path / "c", "--sigma-v", "0.46")
    assert (tmp_path / "a" / "eval.json").read_bytes() == (tmp_path / "c" / "eval.json").read_bytes()


def _crafted_checkpoint(path, mu=(20.0, -6.0)):
    """Toy model whose output ignores its input: one confident component at `mu`."""
    cfg = ModelConfig.toy()
    params = init_params(cfg)
    last = len(cfg.head_sizes)
    params[f"head{last}.W"] = torch.zeros_like(params[f"head{last}.W"])
    cfg_run = RunConfig(model=cfg)
    grid = cfg_run.grid
    bias = np.zeros((grid.k, 5), dtype=np.float32)
    bias[:, 2] = bias[:, 4] = np.log(3.0)
    z = 9
    bias[z, 0] = 4.0
    bias[z, 1] = mu[0] - grid.centers[z, 0]
    bias[z, 2] = bias[z, 4] = 0.0
    bias[z, 3] = mu[1] - grid.centers[z, 1]
    params[f"head{last}.b"] = torch.tensor(bias.ravel())
    save_checkpoint(path, TrainState(cfg, params))
    return z


def test_heatmap_outputs(tmp_path):
    z = _crafted_checkpoint(tmp_path / "ck.npz")
    t = np.arange(40) * 100.0
    write_tracks_csv(tmp_path / "t.csv", {"car": Track(t, np.stack([t / 100.0, 0.0 * t], axis=-1))})
    out = tmp_path / "hm"
    assert run("--config", TOY, "--out", out, "heatmap", tmp_path / "t.csv", "--t", 10,
               "--checkpoint", tmp_path / "ck.npz", "--resolution", 0.25) == 0
    rows = np.loadtxt(out / "heatmap.csv", delimiter=",", skiprows=1)
    assert np.all(rows[:, 2] >= 0)
    assert rows[:, 2].sum() * 0.25**2 == pytest.approx(1.0, abs=0.02)
    preds = list(csv.DictReader((out / "predictions.csv").open()))
    top = preds[0]
    assert int(top["rank"]) == 1 and int(top["cell"]) == z
    assert float(top["mu_x"]) == pytest.approx(20.0, abs=1e-4) and float(top["mu_y"]) == pytest.approx(-6.0, abs=1e-4)
    peak = rows[rows[:, 2].argmax()]
    assert abs(peak[0] - 20.0) <= 0.25 and abs(peak[1] + 6.0) <= 0.25
    assert (out / "heatmap.pgm").read_bytes().startswith(b"P5\n256 256\n255\n")


def test_heatmap_step_out_of_range(tmp_path, capsys):
    _crafted_checkpoint(tmp_path / "ck.npz")
    t = np.arange(20) * 100.0
    write_tracks_csv(tmp_path / "t.csv", {"car": Track(t, np.stack([t / 100.0, 0.0 * t], axis=-1))})
    assert run("--config", TOY, "--out", tmp_path, "heatmap", tmp_path / "t.csv", "--t", 25,
               "--checkpoint", tmp_path / "ck.npz") == 1
    assert "HorizonOutOfRange" in capsys.readouterr().err


def _poly_tracks(sigma, n=30, seed=0):
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n):
        t = np.arange(50) * 100.0
        s = t / 1000.0
        c = rng.normal(0, 1, (7, 2)) * (0.5 ** np.arange(7))[:, None] * 10
        xy = sum(c[k] * s[:, None] ** k for k in range(7)) + rng.normal(0, sigma, (50, 2))
        out[f"p{i}"] = Track(t, xy)
    return out


def test_noise_command(tmp_path, capsys):
    write_tracks_csv(tmp_path / "noisy.csv", _poly_tracks(0.3))
    assert run("--out", tmp_path / "a", "noise", tmp_path / "noisy.csv") == 0
    est = json.loads((tmp_path / "a" / "noise.json").read_text())
    assert est["sigma_v"] == pytest.approx(0.3, rel=0.15)
    write_tracks_csv(tmp_path / "clean.csv", _poly_tracks(0.0))
    assert run("--out", tmp_path / "b", "noise", tmp_path / "clean.csv") == 0
    assert json.loads((tmp_path / "b" / "noise.json").read_text())["sigma_v"] < 1e-9


def test_noise_too_short(tmp_path, capsys):
    t = np.arange(8) * 100.0
    write_tracks_csv(tmp_path / "short.csv", {"s": Track(t, np.stack([t, t], axis=-1))})
    assert run("--out", tmp_path, "noise", tmp_path / "short.csv") == 1
    assert "FitFailure" in capsys.readouterr().err


def test_parse_error_exit(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("track_id,timestamp_ms,x_m,y_m\na,0,0,oops\n")
    assert run("--out", tmp_path, "noise", tmp_path / "bad.csv") == 1
    assert "line 2" in capsys.readouterr().err
