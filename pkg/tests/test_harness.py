import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatsac.agent import GATSACController, read_metrics_csv
from gatsac.env import TrafficEnv
from gatsac.harness import experiments as ex
from gatsac.harness.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_IO, main, parse_overrides
from gatsac.harness.io import read_csv, write_csv
from gatsac.harness.options import resolve
from gatsac.harness.runs import make_run_dir, read_manifest
from gatsac.harness.svg import line_chart
from gatsac.sim import ConfigError, SimConfig

TINY = ["--warmup=5", "--batch_size=4", "--gat_hidden=6", "--hidden_dim=12", "--horizon=40"]


def _only(path, pattern):
    found = sorted(Path(path).glob(pattern))
    assert len(found) == 1, found
    return found[0]


# ----------------------------------------------------------------- options

def test_precedence_cli_over_file_over_defaults(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("# scenario\ndemand=900\nlr=1e-4\nepisodes=7\ncav_penetration=0.3\n")
    o = resolve("train", cfg, {"demand": "1500", "episodes": "2"})
    assert o.scenario.demand == 1500.0
    assert o.scenario.cav_penetration == 0.3
    assert o.agent["lr"] == 1e-4
    assert o.run["episodes"] == 2
    assert o.agent["tau"] == GATSACController().tau
    assert resolve("train").scenario == SimConfig()


def test_unknown_and_malformed_options():
    with pytest.raises(ConfigError, match="bogus"):
        resolve("train", overrides={"bogus": "1"})
    with pytest.raises(ConfigError, match="runs"):
        resolve("train", overrides={"runs": "3"})  # eval-only option
    with pytest.raises(ConfigError, match="episodes"):
        resolve("train", overrides={"episodes": "many"})
    assert parse_overrides(["--a=1", "--b", "2", "--c-d=x"]) == {"a": "1", "b": "2", "c_d": "x"}
    with pytest.raises(ConfigError):
        parse_overrides(["--a"])


# ----------------------------------------------------------------- io, manifest, svg

def test_csv_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.1 + 0.2, "c": "x"}, {"a": 2, "b": -1e-300, "c": None}]
    p = write_csv(tmp_path / "t.csv", ("a", "b", "c"), rows)
    assert read_csv(p) == rows


def test_run_dir_naming(tmp_path):
    import datetime as dt

    now = dt.datetime(2024, 1, 2, 3, 4, 5)
    a = make_run_dir(tmp_path, 7, "train", now)
    b = make_run_dir(tmp_path, 7, "train", now)
    assert a.name == "20240102-030405-train-seed7"
    assert b.name == "20240102-030405-train-seed7-1"


def test_svg_is_well_formed(tmp_path):
    p = line_chart(tmp_path / "c.svg", [{"label": "a<b", "x": [0, 1, 2], "y": [1.0, math.nan, 3.0],
                                         "err": [0.1, 0.2, 0.3]}], "title & more", "x", "y")
    root = ET.parse(p).getroot()
    assert root.tag.endswith("svg")
    assert any(el.tag.endswith("polyline") for el in root.iter())


# ----------------------------------------------------------------- CLI end to end

def test_train_twice_gives_identical_metrics_and_manifest(tmp_path):
    for _ in range(2):
        assert main(["train", "--episodes=1", "--seed=4", f"--out={tmp_path}", *TINY]) == 0
    runs = sorted(tmp_path.glob("*-train-seed4*"))
    assert len(runs) == 2
    a, b = (r / "metrics.csv" for r in runs)
    assert a.read_bytes() == b.read_bytes()
    assert len(read_metrics_csv(a)) == 1
    man = read_manifest(runs[0])
    assert man["episodes"] == "1" and man["seed"] == "4" and man["command"] == "train"
    assert (runs[0] / "checkpoint.npz").exists() and (runs[0] / "training_delay.svg").exists()
    # the resolved config reproduces the run
    again = tmp_path / "again"
    assert main(["train", "--config", str(runs[0] / "config.cfg"), f"--out={again}"]) == 0
    assert _only(again, "*train*/metrics.csv").read_bytes() == a.read_bytes()


def test_manifest_records_episode_count(tmp_path):
    # manifest values come from the resolved options, not from a finished run
    o = resolve("train", overrides={"episodes": "300"})
    from gatsac.harness.cli import _manifest
    from gatsac.harness.runs import write_manifest

    write_manifest(tmp_path, _manifest(o, "train"))
    assert "episodes=300" in (tmp_path / "manifest.txt").read_text().splitlines()


def test_eval_rows_and_artifacts(tmp_path):
    assert main(["train", "--episodes=1", f"--out={tmp_path}", *TINY]) == 0
    ck = _only(tmp_path, "*train*/checkpoint.npz")
    assert main(["eval", f"--checkpoint={ck}", "--runs=3", "--horizon=60", f"--out={tmp_path}"]) == 0
    d = _only(tmp_path, "*-eval-*")
    rows = read_csv(d / "eval.csv")
    assert len(rows) == 4 and rows[-1]["row"] == "aggregate"
    per_run = rows[:3]
    assert rows[-1]["avg_delay"] == pytest.approx(np.mean([r["avg_delay"] for r in per_run]), abs=1e-9)
    assert rows[-1]["avg_delay_std"] == pytest.approx(np.std([r["avg_delay"] for r in per_run], ddof=1), abs=1e-9)
    for r in per_run:
        expected = 100.0 * r["violations"] / r["vehicles"] if r["vehicles"] else 0.0
        assert r["normalized_violations"] == pytest.approx(expected)
        assert r["violations"] == r["rlr"] + r["ttc"] + r["hb"]
    for name in ("trace.csv", "costs.csv", "graph.csv", "attention.csv", "manifest.txt"):
        assert read_csv(d / name) if name.endswith(".csv") else (d / name).exists()
    # scenario from the checkpoint: the horizon override applies, demand stays at the trained value
    assert read_manifest(d)["demand"] == "1200.0"


def test_eval_normalized_violations_recount():
    cfg = SimConfig(demand=1800.0)
    env = TrafficEnv(cfg, horizon=200.0)
    ctrl = ex.fixed_controller(cfg)
    m = ex.run_one(ctrl, cfg, 5, 200.0)
    g = env.reset(5)
    ctrl.begin_episode(env)
    done = False
    while not done:
        res = env.step(ctrl.act(env, g))
        g, done = res.graph, res.done
    recount = len(env.sim.events)
    seen = len(env.sim.departed_records) + int(env.sim.current_delays()[0].size)
    assert m.violations == recount
    assert m.normalized_violations == pytest.approx(100.0 * recount / seen)


def test_baseline_zero_demand_all_zero(tmp_path):
    assert main(["baseline", "--runs=2", "--horizon=60", "--demand=0", f"--out={tmp_path}"]) == 0
    rows = read_csv(_only(tmp_path, "*baseline*/eval.csv"))
    assert len(rows) == 3
    for r in rows:
        for k in ("reward", "avg_delay", "violations", "throughput", "normalized_violations", "fairness_ratio"):
            assert r[k] == 0


def test_sweep_counts_and_recount(tmp_path):
    args = ["sweep", "--levels=0,0.2,0.4,0.6,0.8,1.0", "--densities=600", "--runs=2", "--horizon=20",
            f"--out={tmp_path}"]
    assert main(args) == 0
    d = _only(tmp_path, "*sweep*")
    rows = read_csv(d / "sweep.csv")
    summary = read_csv(d / "sweep_summary.csv")
    assert len(rows) == 12 and len(summary) == 6
    for s in summary:
        cell = [r for r in rows if r["penetration"] == s["penetration"] and r["density"] == s["density"]]
        assert s["runs"] == len(cell) == 2
        assert s["avg_delay_mean"] == pytest.approx(np.mean([r["avg_delay"] for r in cell]), abs=1e-9)
        assert s["avg_delay_std"] == pytest.approx(np.std([r["avg_delay"] for r in cell], ddof=1), abs=1e-9)
        assert all(s[k] >= 0 for k in s if k.endswith("_std"))
    for metric in ("reward", "avg_delay", "violations", "throughput_per_min"):
        ET.parse(d / f"sweep_{metric}.svg")


def test_sweep_parallel_matches_serial():
    cfg = SimConfig()
    ctrl = ex.fixed_controller(cfg)
    serial, _ = ex.sweep(ctrl, cfg, [0.0, 1.0], [600.0], 2, 1, 20.0)
    parallel, _ = ex.sweep(ctrl, cfg, [0.0, 1.0], [600.0], 2, 1, 20.0, jobs=2)
    assert serial == parallel


def test_cli_errors(tmp_path, capsys):
    assert main(["train", "--cav_penetration=1.2", f"--out={tmp_path}"]) == EXIT_CONFIG
    assert "cav_penetration" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == EXIT_IO
    assert "missing.cfg" in capsys.readouterr().err
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", f"--checkpoint={bad}", f"--out={tmp_path}"]) == EXIT_CHECKPOINT
    assert main(["sweep", "--levels=0,1.5", f"--out={tmp_path}"]) == EXIT_CONFIG
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["baseline", f"--out={blocker}", "--runs=1", "--horizon=10"]) == EXIT_IO


def test_checkpoint_shape_mismatch_is_a_checkpoint_error(tmp_path):
    est = GATSACController(warmup=3, batch_size=2, gat_hidden=6, hidden_dim=12)
    est.fit(SimConfig(), episodes=1, horizon=20.0)
    path = tmp_path / "a.npz"
    est.save(path)
    data = dict(np.load(path))
    data["__meta__/param.gat_hidden"] = np.array(8)
    np.savez(path, **data)
    assert main(["eval", f"--checkpoint={path}", f"--out={tmp_path}", "--runs=1"]) == EXIT_CHECKPOINT


# ----------------------------------------------------------------- tuning

def test_search_space_samples_in_range_and_loguniform_median():
    rng = np.random.default_rng(0)
    draws = [ex.sample_params(rng) for _ in range(1000)]
    for p in ex.SEARCH_SPACE:
        assert all(p.contains(d[p.name]) for d in draws), p.name
    med = float(np.median([d["lr"] for d in draws]))
    # median of a log-uniform on [1e-5, 1e-3] is 1e-4; 1000 draws pin log10 to about +-0.05
    assert abs(math.log10(med) + 4.0) < 0.1
    assert {d["batch_size"] for d in draws} == {32, 64, 128, 256}
    assert {d["gat_hidden"] for d in draws} == {64, 128, 256}


@settings(max_examples=50)
@given(st.lists(st.floats(-10, 10), min_size=0, max_size=9), st.floats(-10, 10))
def test_median_pruner_rule(prior, value):
    pr = ex.MedianPruner(first=40, every=20, min_trials=2)
    for v in prior:
        pr.record({40: v})
    expected = len(prior) >= 2 and value < float(np.median(prior))
    assert pr.should_prune(40, value) == expected
    assert pr.is_checkpoint(40) and pr.is_checkpoint(60) and not pr.is_checkpoint(50) and not pr.is_checkpoint(20)


def test_single_trial_is_best(tmp_path):
    args = ["tune", "--trials=1", "--episodes=2", "--objective_window=2", "--horizon=20", "--warmup=3",
            "--gat_hidden=6", "--hidden_dim=12", f"--out={tmp_path}"]
    assert main(args) == 0
    d = _only(tmp_path, "*tune*")
    trials = read_csv(d / "trials.csv")
    assert len(trials) == 1 and trials[0]["status"] == "complete"
    best = dict(line.split("=", 1) for line in (d / "best.cfg").read_text().splitlines())
    assert float(best["lr"]) == pytest.approx(trials[0]["lr"])
    # the overlay is a valid config file for training
    assert resolve("train", d / "best.cfg").agent["lr"] == pytest.approx(trials[0]["lr"])
