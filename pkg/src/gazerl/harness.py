"""Experiment harness: run training to disk, compare runs, sweep ablations.

Artifact layout of a run directory:

    config.toml    fully resolved configuration (flat key = value)
    metrics.csv    one row per iteration, schema below; deterministic given
                   the config and seed (no wall-clock fields in here)
    timing.csv     iteration, global_step, seconds, sps; wall-clock only
    weights.npz    final model parameters, keyed by qualified name
    heatmaps/      attention snapshots (patch and foveal variants only)

metrics.csv schema. All variants share:
    iteration, global_step, episodes, return_mean, return_std, success_rate,
    loss_policy, loss_value, entropy, approx_kl, clip_frac, loss_rl, epochs_run
The foveal variants append gaze_mu_x, gaze_mu_y, gaze_sigma_x, gaze_sigma_y;
foveal+contrastive further appends loss_con, loss_spread, triplet_yield,
buffer_size.  The header is written exactly once and global_step never
decreases; both facts are covered by tests.

The output root can be redirected with the GAZERL_OUT_ROOT environment
variable; relative out_dir values are joined under it.
"""

import csv
import math
import os
import time

import numpy as np

from . import tensor as T
from .config import ABLATION_AXES, ExperimentConfig, load_config, save_config
from .perception import heatmap_image, overlay_heatmap, save_png
from .rl import ActorCritic, Trainer, TrainingDiverged

SMOOTHING_WINDOW = 10
SUCCESS_THRESHOLD = 0.5


def resolve_out_dir(out_dir):
    root = os.environ.get("GAZERL_OUT_ROOT", "")
    if root and not os.path.isabs(out_dir):
        return os.path.join(root, out_dir)
    return out_dir


def _format_cell(value):
    """CSV cell text; repr keeps float round-trips exact and deterministic."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class CsvLog:
    """Append-only CSV writer; header comes from the first row's keys."""

    def __init__(self, path):
        self.path = path
        self._fh = None
        self._columns = None

    def write(self, row):
        if self._fh is None:
            self._fh = open(self.path, "w", newline="")
            self._columns = list(row.keys())
            self._fh.write(",".join(self._columns) + "\n")
        if list(row.keys()) != self._columns:
            raise ValueError(f"row keys {list(row.keys())} do not match the "
                             f"header {self._columns}")
        self._fh.write(",".join(_format_cell(row[c]) for c in self._columns) + "\n")
        self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _save_weights(model, path):
    state = model.state_dict()
    np.savez(path, **{k: state[k] for k in sorted(state)})


def _load_weights(model, path):
    with np.load(path) as data:
        model.load_state_dict({k: data[k] for k in data.files})


def _export_heatmaps(trainer, out_dir, iteration):
    """Snapshot the attention map for the first env's current observation."""
    if trainer.agent.attention is None:
        return
    obs = trainer.obs[:1]
    with T.no_grad():
        out = trainer.agent.forward(obs)
    weights = out["attention"]["weights"].data[0, 0]
    hw = obs.shape[1:3]
    save_png(os.path.join(out_dir, f"iter_{iteration:05d}.png"),
             heatmap_image(weights, hw))
    save_png(os.path.join(out_dir, f"iter_{iteration:05d}_overlay.png"),
             overlay_heatmap(obs[0], weights))


def run(cfg):
    """Train one configuration to its step budget, writing artifacts as we go.

    Returns the run directory.  Raises ConfigError for a bad config and
    TrainingDiverged when a loss goes non-finite (partial CSVs stay on disk).
    """
    cfg.validate()
    out_dir = resolve_out_dir(cfg.out_dir)
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.toml"))

    trainer = Trainer(cfg.to_trainer_config())
    steps_per_iter = cfg.num_envs * cfg.num_steps
    total_iters = max(1, math.ceil(cfg.total_steps / steps_per_iter))
    want_heatmaps = trainer.agent.attention is not None
    heat_dir = os.path.join(out_dir, "heatmaps")
    if want_heatmaps:
        os.makedirs(heat_dir, exist_ok=True)

    metrics = CsvLog(os.path.join(out_dir, "metrics.csv"))
    timing = CsvLog(os.path.join(out_dir, "timing.csv"))
    try:
        while trainer.global_step < cfg.total_steps:
            t0 = time.perf_counter()
            row = trainer.run_iteration()
            seconds = time.perf_counter() - t0
            metrics.write(row)
            timing.write({"iteration": row["iteration"],
                          "global_step": row["global_step"],
                          "seconds": seconds,
                          "sps": steps_per_iter / max(seconds, 1e-9)})
            it = row["iteration"]
            due = it == 1 or it == total_iters or (cfg.heatmap_every > 0
                                                   and it % cfg.heatmap_every == 0)
            if want_heatmaps and due:
                _export_heatmaps(trainer, heat_dir, it)
    finally:
        metrics.close()
        timing.close()
    _save_weights(trainer.agent, os.path.join(out_dir, "weights.npz"))
    return out_dir


def smoothed_success(success, episodes=None, window=SMOOTHING_WINDOW):
    """Trailing success rate over a window of iterations.

    With ``episodes`` (episodes finished per iteration) the window is
    pooled: sum of successes over sum of episodes.  Episodes finish in
    near-synchronized waves, so iterations where only one or two stragglers
    end would otherwise count as much as full waves and a single lucky
    episode could spike the average.  Without ``episodes`` this falls back
    to a plain moving average of the per-iteration rates.
    """
    success = np.asarray(success, dtype=np.float64)
    out = np.empty(len(success), dtype=np.float64)
    if episodes is None:
        for i in range(len(success)):
            lo = max(0, i - window + 1)
            out[i] = float(np.mean(success[lo:i + 1]))
        return out
    episodes = np.asarray(episodes, dtype=np.float64)
    wins = success * episodes
    for i in range(len(success)):
        lo = max(0, i - window + 1)
        ended = episodes[lo:i + 1].sum()
        out[i] = wins[lo:i + 1].sum() / ended if ended else 0.0
    return out


def _episodes_per_iteration(rows):
    """Per-iteration episode counts from the cumulative ``episodes`` column."""
    total = np.array([int(r["episodes"]) for r in rows], dtype=np.int64)
    return np.diff(total, prepend=0)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def analyze_run(run_dir):
    """Summary statistics for one run directory."""
    rows = _read_csv(os.path.join(run_dir, "metrics.csv"))
    if not rows:
        raise ValueError(f"{run_dir}: metrics.csv has no data rows")
    success = np.array([float(r["success_rate"]) for r in rows])
    steps = np.array([int(r["global_step"]) for r in rows])
    smooth = smoothed_success(success, _episodes_per_iteration(rows))
    hit = np.nonzero(smooth >= SUCCESS_THRESHOLD)[0]
    steps_to_50 = int(steps[hit[0]]) if hit.size else None
    timing_path = os.path.join(run_dir, "timing.csv")
    mean_sps = None
    if os.path.exists(timing_path):
        trows = _read_csv(timing_path)
        if trows:
            mean_sps = float(np.mean([float(r["sps"]) for r in trows]))
    return {"run": run_dir, "steps_to_50": steps_to_50,
            "final_success": float(smooth[-1]), "mean_sps": mean_sps}


def compare(run_dirs):
    """Per-run sample efficiency, with ratios against the first run.

    ratio = steps_to_50(run) / steps_to_50(first run); larger means slower.
    Runs that never reach the threshold report steps_to_50 as None and are
    rendered as "not reached".
    """
    results = [analyze_run(d) for d in run_dirs]
    base = results[0]["steps_to_50"] if results else None
    for r in results:
        if base and r["steps_to_50"] is not None:
            r["ratio"] = r["steps_to_50"] / base
        else:
            r["ratio"] = None
    return results


def format_compare_table(results):
    header = f"{'run':<40} {'steps_to_50':>12} {'ratio':>7} {'final':>7} {'sps':>9}"
    lines = [header, "-" * len(header)]
    for r in results:
        steps = "not reached" if r["steps_to_50"] is None else str(r["steps_to_50"])
        ratio = "n/a" if r["ratio"] is None else f"{r['ratio']:.2f}"
        sps = "n/a" if r["mean_sps"] is None else f"{r['mean_sps']:.1f}"
        lines.append(f"{os.path.basename(r['run'].rstrip('/')) or r['run']:<40} "
                     f"{steps:>12} {ratio:>7} {r['final_success']:>7.3f} {sps:>9}")
    return "\n".join(lines)


def write_summary_csv(results, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["run", "steps_to_50", "ratio", "final_success", "mean_sps"])
        writer.writeheader()
        for r in results:
            writer.writerow({k: ("" if r.get(k) is None else r.get(k))
                             for k in writer.fieldnames})


def ablate(base, axis, values):
    """One run per axis value under base.out_dir, then a combined summary.

    A failed run is reported and skipped; the grid keeps going.  Returns
    (results, failures) where results is the compare() output over the runs
    that finished.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of "
                         f"{ABLATION_AXES}")
    from dataclasses import replace

    root = resolve_out_dir(base.out_dir)
    os.makedirs(root, exist_ok=True)
    done, failures = [], []
    for value in values:
        sub = os.path.join(base.out_dir, f"{axis}={value}")
        cfg = replace(base, out_dir=sub, **{axis: value})
        try:
            done.append(run(cfg))
        except Exception as exc:  # keep sweeping past individual failures
            failures.append((sub, f"{type(exc).__name__}: {exc}"))
    results = compare(done) if done else []
    if results:
        write_summary_csv(results, os.path.join(root, "summary.csv"))
    return results, failures


def render_heatmaps(run_dir, n_frames=8, out_dir=None, seed=None):
    """Re-render attention maps from a finished run's saved weights.

    Plays the deterministic (mean-action) policy in a fresh env and writes,
    per frame, the raw observation, the attention heatmap, and an overlay.
    """
    from .envs import PushEnv

    cfg = load_config(os.path.join(run_dir, "config.toml"))
    if cfg.variant == "baseline":
        raise ValueError("baseline runs have no attention maps to render")
    tc = cfg.to_trainer_config()
    agent = ActorCritic(np.random.default_rng(0), variant=tc.variant,
                        sigma_target=cfg.sigma_target)
    _load_weights(agent, os.path.join(run_dir, "weights.npz"))
    out_dir = out_dir or os.path.join(run_dir, "rendered")
    os.makedirs(out_dir, exist_ok=True)
    env = PushEnv(seed=cfg.seed if seed is None else seed, clutter=tc.clutter,
                  episode_len=cfg.episode_len)
    obs = env.reset()
    written = []
    for i in range(n_frames):
        with T.no_grad():
            out = agent.forward(obs[None])
        weights = out["attention"]["weights"].data[0, 0]
        base = os.path.join(out_dir, f"frame_{i:03d}")
        save_png(base + "_obs.png", obs)
        save_png(base + "_heat.png", heatmap_image(weights, obs.shape[:2]))
        save_png(base + "_overlay.png", overlay_heatmap(obs, weights))
        written.append(base)
        obs, _, done, _ = env.step(out["mean"].data[0])
        if done:
            obs = env.reset()
    return written
