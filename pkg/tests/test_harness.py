"""Harness artifacts, compare arithmetic, ablation sweeps, and the CLI."""

import csv
import os

import numpy as np
import pytest

from gazerl.cli import main
from gazerl.config import ExperimentConfig
from gazerl.harness import CsvLog, ablate, analyze_run, compare, \
    format_compare_table, render_heatmaps, resolve_out_dir, run, smoothed_success

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def tiny_config(out_dir, **kw):
    base = dict(out_dir=str(out_dir), seed=5, variant="foveal+contrastive",
                task="clean", total_steps=64, num_envs=2, num_steps=8,
                episode_len=10, heatmap_every=2, epochs=2, num_minibatches=2,
                buffer_size=512, n_anchors=8, knn_k=4)
    base.update(kw)
    return ExperimentConfig(**base)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- run artifacts

def test_run_writes_all_artifacts(tmp_path):
    out = run(tiny_config(tmp_path / "a"))
    assert os.path.isfile(os.path.join(out, "config.toml"))
    assert os.path.isfile(os.path.join(out, "metrics.csv"))
    assert os.path.isfile(os.path.join(out, "timing.csv"))
    assert os.path.isfile(os.path.join(out, "weights.npz"))
    # 4 iterations at heatmap_every=2: iters 1, 2, 4 get snapshots
    heats = sorted(os.listdir(os.path.join(out, "heatmaps")))
    assert "iter_00001.png" in heats and "iter_00004.png" in heats
    assert "iter_00002.png" in heats and "iter_00003.png" not in heats


def test_metrics_schema_by_variant(tmp_path):
    rows = read_rows(os.path.join(run(tiny_config(tmp_path / "b", variant="baseline")),
                                  "metrics.csv"))
    assert "gaze_mu_x" not in rows[0] and "loss_con" not in rows[0]

    rows = read_rows(os.path.join(run(tiny_config(tmp_path / "f", variant="foveal")),
                                  "metrics.csv"))
    assert "gaze_mu_x" in rows[0] and "loss_con" not in rows[0]

    rows = read_rows(os.path.join(run(tiny_config(tmp_path / "fc")), "metrics.csv"))
    assert "gaze_mu_x" in rows[0] and "loss_con" in rows[0]
    assert "triplet_yield" in rows[0] and "buffer_size" in rows[0]


def test_baseline_run_has_no_heatmaps(tmp_path):
    out = run(tiny_config(tmp_path / "b", variant="baseline"))
    assert not os.path.isdir(os.path.join(out, "heatmaps"))


def test_global_step_nondecreasing_and_header_once(tmp_path):
    out = run(tiny_config(tmp_path / "a"))
    with open(os.path.join(out, "metrics.csv")) as fh:
        lines = fh.read().splitlines()
    assert sum(1 for l in lines if l.startswith("iteration,")) == 1
    steps = [int(r["global_step"]) for r in read_rows(os.path.join(out, "metrics.csv"))]
    assert steps == sorted(steps)
    assert len(steps) == 4  # 64 steps / (2 envs * 8 steps)


def test_identical_configs_identical_metrics(tmp_path):
    cfg1 = tiny_config(tmp_path / "r1")
    cfg2 = tiny_config(tmp_path / "r2")
    out1, out2 = run(cfg1), run(cfg2)
    b1 = open(os.path.join(out1, "metrics.csv"), "rb").read()
    b2 = open(os.path.join(out2, "metrics.csv"), "rb").read()
    assert b1 == b2


def test_resolved_config_written_beside_outputs(tmp_path):
    from gazerl.config import load_config

    cfg = tiny_config(tmp_path / "a", lambda_attn=0.05)
    out = run(cfg)
    assert load_config(os.path.join(out, "config.toml")) == cfg


def test_invalid_config_raises_before_artifacts(tmp_path):
    from gazerl.config import ConfigError

    cfg = tiny_config(tmp_path / "bad", total_steps=0)
    with pytest.raises(ConfigError, match="total_steps"):
        run(cfg)
    assert not (tmp_path / "bad").exists()


def test_out_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("GAZERL_OUT_ROOT", str(tmp_path / "root"))
    assert resolve_out_dir("runs/x") == str(tmp_path / "root" / "runs/x")
    assert resolve_out_dir("/abs/x") == "/abs/x"
    monkeypatch.delenv("GAZERL_OUT_ROOT")
    assert resolve_out_dir("runs/x") == "runs/x"


# ---------------------------------------------------------------------- CsvLog

def test_csvlog_rejects_schema_drift(tmp_path):
    log = CsvLog(str(tmp_path / "t.csv"))
    log.write({"a": 1, "b": 2.5})
    with pytest.raises(ValueError, match="header"):
        log.write({"a": 1, "c": 3})
    log.close()
    with open(tmp_path / "t.csv") as fh:
        assert fh.read() == "a,b\n1,2.5\n"


# ------------------------------------------------------------------- analytics

def test_smoothed_success_window():
    got = smoothed_success(np.array([0.0, 0.0, 1.0, 1.0]), window=2)
    assert np.allclose(got, [0.0, 0.0, 0.5, 1.0])
    flat = smoothed_success(np.ones(30))
    assert np.allclose(flat, 1.0)


def test_smoothed_success_pools_episodes():
    # one lucky episode in an otherwise empty iteration must not spike the
    # pooled rate: 1 success / (64 + 1 + 64) episodes, not mean(0, 1, 0)
    sr = np.array([0.0, 1.0, 0.0])
    eps = np.array([64, 1, 64])
    got = smoothed_success(sr, eps, window=3)
    assert np.allclose(got, [0.0, 1 / 65, 1 / 129])
    # iterations where nothing ended carry weight zero
    got = smoothed_success(np.array([0.5, 0.5]), np.array([2, 0]), window=2)
    assert np.allclose(got, [0.5, 0.5])
    # an all-empty window reports zero rather than dividing by zero
    assert smoothed_success(np.array([0.7]), np.array([0]))[0] == 0.0


def write_metrics(path, steps, success, episodes=None):
    os.makedirs(path, exist_ok=True)
    if episodes is None:
        episodes = np.arange(1, len(steps) + 1) * 8
    with open(os.path.join(path, "metrics.csv"), "w") as fh:
        fh.write("iteration,global_step,episodes,success_rate\n")
        for i, (s, e, sr) in enumerate(zip(steps, episodes, success), start=1):
            fh.write(f"{i},{s},{e},{sr}\n")


def test_compare_ratio_matches_worked_example(tmp_path):
    # first run crosses the 50% threshold at step 100, second at step 240
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    write_metrics(a, [50, 100, 150], [0.0, 1.0, 1.0])
    write_metrics(b, [120, 240, 360], [0.0, 1.0, 1.0])
    results = compare([a, b])
    assert results[0]["steps_to_50"] == 100 and results[0]["ratio"] == 1.0
    assert results[1]["steps_to_50"] == 240 and results[1]["ratio"] == 2.4


def test_compare_never_reached(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    write_metrics(a, [10, 20], [1.0, 1.0])
    write_metrics(b, [10, 20], [0.0, 0.0])
    results = compare([a, b])
    assert results[1]["steps_to_50"] is None and results[1]["ratio"] is None
    table = format_compare_table(results)
    assert "not reached" in table and "n/a" in table


def test_compare_identical_runs_ratio_one(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for d in (a, b):
        write_metrics(d, [64, 128, 192], [0.0, 1.0, 1.0])
    results = compare([a, b])
    assert results[0]["ratio"] == results[1]["ratio"] == 1.0


def test_analyze_run_reads_timing(tmp_path):
    d = str(tmp_path / "a")
    write_metrics(d, [10, 20], [1.0, 1.0])
    with open(os.path.join(d, "timing.csv"), "w") as fh:
        fh.write("iteration,global_step,seconds,sps\n1,10,0.5,20.0\n2,20,0.5,40.0\n")
    r = analyze_run(d)
    assert r["mean_sps"] == 30.0
    assert r["final_success"] == 1.0


# -------------------------------------------------------------------- ablation

def test_ablate_unknown_axis(tmp_path):
    with pytest.raises(ValueError, match="axis"):
        ablate(tiny_config(tmp_path / "g"), "gamma", [0.9])


def test_ablate_grid_runs_and_summarizes(tmp_path):
    base = tiny_config(tmp_path / "grid")
    results, failures = ablate(base, "update_freq", [1, 2])
    assert not failures and len(results) == 2
    assert os.path.isfile(tmp_path / "grid" / "summary.csv")
    names = {os.path.basename(r["run"]) for r in results}
    assert names == {"update_freq=1", "update_freq=2"}


def test_ablate_continues_past_failures(tmp_path):
    base = tiny_config(tmp_path / "grid")
    # update_freq=0 fails validation inside run(); the grid must keep going
    results, failures = ablate(base, "update_freq", [0, 1])
    assert len(results) == 1 and len(failures) == 1
    assert "update_freq" in failures[0][1]


# ------------------------------------------------------------- render-heatmaps

def test_render_heatmaps_from_saved_run(tmp_path):
    out = run(tiny_config(tmp_path / "a", variant="foveal"))
    written = render_heatmaps(out, n_frames=3)
    assert len(written) == 3
    for base in written:
        for suffix in ("_obs.png", "_heat.png", "_overlay.png"):
            assert os.path.isfile(base + suffix)


def test_render_heatmaps_rejects_baseline(tmp_path):
    out = run(tiny_config(tmp_path / "b", variant="baseline"))
    with pytest.raises(ValueError, match="baseline"):
        render_heatmaps(out)


# ------------------------------------------------------------------------- CLI

def test_cli_run_and_compare(tmp_path, capsys):
    out = str(tmp_path / "cli")
    code = main(["run", "--set", f"out_dir={out}", "--set", "seed=5",
                 "--set", "variant=foveal", "--set", "total_steps=32",
                 "--set", "num_envs=2", "--set", "num_steps=8",
                 "--set", "episode_len=10", "--set", "epochs=1",
                 "--set", "num_minibatches=2"])
    assert code == 0
    assert "run complete" in capsys.readouterr().out
    assert main(["compare", out]) == 0
    assert "steps_to_50" in capsys.readouterr().out


def test_cli_config_error_exit_code(tmp_path, capsys):
    code = main(["run", "--set", "variant=nope"])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_cli_unknown_key_exit_code(capsys):
    assert main(["run", "--set", "sede=3"]) == 2
    capsys.readouterr()


def test_cli_config_file(tmp_path, capsys):
    cfg_path = tmp_path / "exp.toml"
    cfg_path.write_text(
        f'out_dir = "{tmp_path / "run"}"\nvariant = "baseline"\ntotal_steps = 32\n'
        "num_envs = 2\nnum_steps = 8\nepisode_len = 10\nepochs = 1\n"
        "num_minibatches = 2\n")
    assert main(["run", "--config", str(cfg_path)]) == 0
    capsys.readouterr()
    assert (tmp_path / "run" / "metrics.csv").is_file()


def test_cli_ablate(tmp_path, capsys):
    out = str(tmp_path / "ab")
    code = main(["ablate", "--axis", "update_freq", "--values", "1,2",
                 "--set", f"out_dir={out}", "--set", "variant=foveal+contrastive",
                 "--set", "total_steps=32", "--set", "num_envs=2",
                 "--set", "num_steps=8", "--set", "episode_len=10",
                 "--set", "epochs=1", "--set", "num_minibatches=2",
                 "--set", "buffer_size=256", "--set", "n_anchors=8",
                 "--set", "knn_k=4"])
    assert code == 0
    assert "update_freq=1" in capsys.readouterr().out
