"""Training, evaluation, sweeps and hyperparameter search used by the CLI."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..agent import GATSACController, read_metrics_csv
from ..baselines import FixedPlan, FixedTimingController
from ..env import TrafficEnv
from ..gat import write_attention_csv
from ..objectives import CostWeights, write_cost_csv
from ..sim.config import SimConfig
from .io import write_csv
from .svg import line_chart

logger = logging.getLogger(__name__)

EVAL_METRICS = ("reward", "normalized_reward", "avg_delay", "delay_cav", "delay_hdv", "fairness_ratio",
                "violations", "normalized_violations", "rlr", "ttc", "hb", "throughput", "throughput_per_min",
                "vehicles")
EVAL_HEADER = ("row", "seed") + EVAL_METRICS + tuple(f"{m}_std" for m in EVAL_METRICS)


def eval_seed(seed, run):
    """Simulator seed of evaluation run ``run``; disjoint from the training episode seeds."""
    return int(np.random.SeedSequence([int(seed), int(run), 0xE7A1]).generate_state(1)[0])


def std(values):
    """Sample standard deviation (0 for a single value)."""
    values = np.asarray(values, dtype=float)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(scenario: SimConfig, agent_params, episodes, seed, run_dir, horizon=None):
    """Train a controller; writes metrics.csv, checkpoint.npz and training curves."""
    run_dir = Path(run_dir)
    est = GATSACController(**agent_params, random_state=int(seed))
    est.fit(scenario, episodes=episodes, metrics_path=run_dir / "metrics.csv", horizon=horizon)
    est.save(run_dir / "checkpoint.npz", scenario)
    rows = read_metrics_csv(run_dir / "metrics.csv")
    ep = [r["episode"] for r in rows]
    line_chart(run_dir / "training_reward.svg", [{"label": "reward", "x": ep, "y": [r["reward"] for r in rows]}],
               "Training reward", "episode", "episode reward")
    line_chart(run_dir / "training_delay.svg", [{"label": "delay", "x": ep, "y": [r["delay"] for r in rows]}],
               "Training delay", "episode", "average delay (s)")
    return est, rows


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def controller_weights(controller):
    return controller.cost_weights() if hasattr(controller, "cost_weights") else CostWeights()


def metrics_row(m):
    return {k: getattr(m, k) for k in EVAL_METRICS}


def run_one(controller, scenario: SimConfig, seed, horizon, artifact_dir=None):
    """One evaluation episode; optionally dumps trace, costs, graph and attention CSVs."""
    env = TrafficEnv(scenario, controller_weights(controller), horizon=horizon)
    graph = env.reset(seed)
    controller.begin_episode(env)
    tracing = artifact_dir is not None
    if tracing:
        env.sim.sample_trace()
    done = False
    while not done:
        res = env.step(controller.act(env, graph))
        graph, done = res.graph, res.done
        if tracing:
            env.sim.sample_trace()
    if tracing:
        d = Path(artifact_dir)
        env.sim.export_trace(d / "trace.csv")
        write_cost_csv(d / "costs.csv", env.costs)
        graph.to_csv(d / "graph.csv")
        if hasattr(controller, "agent_"):
            write_attention_csv(d / "attention.csv", controller.agent_.encoder, graph)
    return env.metrics()


def aggregate(rows, metrics=EVAL_METRICS):
    out = {}
    for k in metrics:
        vals = [r[k] for r in rows]
        out[k] = float(np.mean(vals))
        out[f"{k}_std"] = std(vals)
    return out


def evaluate(controller, scenario: SimConfig, runs, seed, horizon, run_dir=None):
    """Per-run metric rows plus their aggregate (mean and sample std).

    With ``run_dir`` the rows go to ``eval.csv`` and run 0 leaves its trace,
    cost, graph and (for GAT-SAC) attention dumps.
    """
    rows = []
    for r in range(int(runs)):
        s = eval_seed(seed, r)
        m = run_one(controller, scenario, s, horizon, run_dir if (run_dir is not None and r == 0) else None)
        rows.append({"row": r, "seed": s, **metrics_row(m)})
    agg = {"row": "aggregate", "seed": seed, **aggregate(rows)}
    if run_dir is not None:
        write_csv(Path(run_dir) / "eval.csv", EVAL_HEADER, rows + [agg])
    return rows, agg


def fixed_controller(scenario: SimConfig):
    return FixedTimingController(FixedPlan.from_config(scenario))


# ---------------------------------------------------------------------------
# penetration / density sweep
# ---------------------------------------------------------------------------

SWEEP_HEADER = ("penetration", "density", "run", "seed") + EVAL_METRICS
SWEEP_SUMMARY_METRICS = ("reward", "avg_delay", "violations", "normalized_violations", "throughput_per_min",
                         "fairness_ratio")
SWEEP_SUMMARY_HEADER = (("penetration", "density", "runs")
                        + tuple(x for m in SWEEP_SUMMARY_METRICS for x in (f"{m}_mean", f"{m}_std")))


def _sweep_cell(args):
    controller, scenario, level, density, run, seed, horizon = args
    cfg = scenario.replace(cav_penetration=level, demand=density)
    s = eval_seed(seed, run)
    m = run_one(controller, cfg, s, horizon)
    return {"penetration": level, "density": density, "run": run, "seed": s, **metrics_row(m)}


def sweep(controller, scenario: SimConfig, levels, densities, runs, seed, horizon, run_dir=None, jobs=1):
    """One row per (penetration, density, run) plus per-cell summaries and SVG plots.

    Cells run in parallel when ``jobs > 1``; rows are ordered by cell key.
    """
    for lv in levels:
        if not 0.0 <= lv <= 1.0:
            raise ValueError(f"penetration level {lv} outside [0, 1]")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    cells = [(controller, scenario, float(lv), float(d), r, seed, horizon)
             for lv in levels for d in densities for r in range(int(runs))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    rows.sort(key=lambda r: (r["penetration"], r["density"], r["run"]))
    summary = summarize_sweep(rows)
    if run_dir is not None:
        d = Path(run_dir)
        write_csv(d / "sweep.csv", SWEEP_HEADER, rows)
        write_csv(d / "sweep_summary.csv", SWEEP_SUMMARY_HEADER, summary)
        plot_sweep(summary, d)
    return rows, summary


def summarize_sweep(rows):
    cells = {}
    for r in rows:
        cells.setdefault((r["penetration"], r["density"]), []).append(r)
    out = []
    for (lv, d), group in sorted(cells.items()):
        row = {"penetration": lv, "density": d, "runs": len(group)}
        for m in SWEEP_SUMMARY_METRICS:
            vals = [g[m] for g in group]
            row[f"{m}_mean"] = float(np.mean(vals))
            row[f"{m}_std"] = std(vals)
        out.append(row)
    return out


_PLOTS = (("reward", "episode reward"), ("avg_delay", "average delay (s)"), ("violations", "safety violations"),
          ("throughput_per_min", "throughput (veh/min)"))


def plot_sweep(summary, run_dir):
    densities = sorted({r["density"] for r in summary})
    for metric, label in _PLOTS:
        series = []
        for d in densities:
            pts = [r for r in summary if r["density"] == d]
            series.append({"label": f"{d:g} veh/h", "x": [r["penetration"] for r in pts],
                           "y": [r[f"{metric}_mean"] for r in pts], "err": [r[f"{metric}_std"] for r in pts]})
        line_chart(Path(run_dir) / f"sweep_{metric}.svg", series, f"{label} vs CAV penetration",
                   "CAV penetration rate", label)


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchParam:
    name: str
    kind: str  # "loguniform", "uniform" or "categorical"
    low: float = 0.0
    high: float = 0.0
    choices: tuple = ()

    def sample(self, rng):
        if self.kind == "loguniform":
            return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        return self.choices[int(rng.integers(len(self.choices)))]

    def contains(self, value):
        if self.kind == "categorical":
            return value in self.choices
        return self.low <= value <= self.high


SEARCH_SPACE = (
    SearchParam("lr", "loguniform", 1e-5, 1e-3),
    SearchParam("tau", "loguniform", 0.001, 0.02),
    SearchParam("gamma", "uniform", 0.90, 0.995),
    SearchParam("batch_size", "categorical", choices=(32, 64, 128, 256)),
    SearchParam("init_alpha", "uniform", 0.05, 0.5),
    SearchParam("entropy_multiplier", "uniform", 0.3, 1.0),
    SearchParam("gat_hidden", "categorical", choices=(64, 128, 256)),
    SearchParam("gat_dropout", "uniform", 0.1, 0.5),
    SearchParam("grad_clip", "uniform", 0.5, 2.0),
    SearchParam("w_d", "uniform", 0.5, 2.0),
    SearchParam("w_f", "uniform", 0.1, 1.0),
    SearchParam("w_s", "uniform", 1.0, 3.0),
)
SEARCH_NAMES = tuple(p.name for p in SEARCH_SPACE)


def sample_params(rng):
    return {p.name: p.sample(rng) for p in SEARCH_SPACE}


class MedianPruner:
    """Stop a trial whose intermediate value falls below the median of earlier trials at the same episode.

    Checks happen at ``first`` and then every ``every`` episodes, once at
    least ``min_trials`` earlier trials reported a value at that episode.
    """

    def __init__(self, first=40, every=20, min_trials=2):
        self.first = int(first)
        self.every = int(every)
        self.min_trials = int(min_trials)
        self.reports = {}  # episode -> list of values from finished or pruned trials

    def is_checkpoint(self, episode):
        return episode >= self.first and (episode - self.first) % self.every == 0

    def should_prune(self, episode, value):
        prior = self.reports.get(episode, [])
        return len(prior) >= self.min_trials and value < float(np.median(prior))

    def record(self, values):
        """Add a finished trial's intermediate values ({episode: value})."""
        for ep, v in values.items():
            self.reports.setdefault(ep, []).append(v)


TRIAL_HEADER = ("trial", "status", "pruned_at", "episodes", "objective") + SEARCH_NAMES


def tune(scenario: SimConfig, agent_params, trials, episodes, seed, run_dir=None, horizon=None, prune_at=40,
         prune_every=20, prune_window=10, min_trials=2, objective_window=50, inject=None, inject_trial=None):
    """Random search over the hyperparameter space with median pruning.

    Every trial uses the same seed, so trials meet identical traffic. The
    score of an episode is its reward per control step recomputed with the
    reference objective weights (so trials with different sampled weights are
    comparable); it includes the throughput bonus. The intermediate value at
    a check is the mean score of the last ``prune_window`` episodes, the
    objective the mean of the last ``objective_window`` episodes.

    ``inject`` (a dict) overrides sampled values of trial ``inject_trial``.
    """
    rng = np.random.default_rng([int(seed), 0x7E5])
    pruner = MedianPruner(prune_at, prune_every, min_trials)
    results, curves = [], []
    for t in range(int(trials)):
        params = sample_params(rng)
        if inject and (inject_trial is None or t == int(inject_trial)):
            params.update(inject)
        est = GATSACController(**{**agent_params, **params}, random_state=int(seed))
        scores, reported = [], {}
        state = {"pruned_at": None}

        def callback(ep, row, scores=scores, reported=reported, state=state):
            scores.append(row["reference_reward"])
            if pruner.is_checkpoint(ep):
                value = float(np.mean(scores[-prune_window:]))
                reported[ep] = value
                if pruner.should_prune(ep, value):
                    state["pruned_at"] = ep
                    return True
            return False

        est.fit(scenario, episodes=episodes, callback=callback, horizon=horizon)
        pruner.record(reported)
        pruned = state["pruned_at"] is not None
        objective = None if pruned else float(np.mean(scores[-objective_window:]))
        results.append({"trial": t, "status": "pruned" if pruned else "complete", "pruned_at": state["pruned_at"],
                        "episodes": len(scores), "objective": objective, **params})
        curves.append(scores)
        logger.info("trial %d %s objective %s", t, results[-1]["status"], objective)
    complete = [r for r in results if r["status"] == "complete"]
    best = max(complete, key=lambda r: r["objective"]) if complete else None
    if run_dir is not None:
        d = Path(run_dir)
        write_csv(d / "trials.csv", TRIAL_HEADER, results)
        write_csv(d / "intermediate.csv", ("trial", "episode", "score"),
                  [{"trial": t, "episode": i + 1, "score": s} for t, c in enumerate(curves) for i, s in enumerate(c)])
        if best is not None:
            (d / "best.cfg").write_text("".join(f"{k}={best[k]!r}\n" for k in SEARCH_NAMES), encoding="utf-8")
        line_chart(d / "tune_scores.svg",
                   [{"label": f"trial {t}", "x": list(range(1, len(c) + 1)), "y": c} for t, c in enumerate(curves)],
                   "Trial scores", "episode", "normalized reward (reference weights)")
    return results, best

