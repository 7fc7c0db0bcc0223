"""``gatsac`` command line: train, eval, baseline, sweep and tune.

Every subcommand accepts ``--config FILE`` (flat ``key=value`` lines) and
``--key=value`` overrides for any scenario field, controller hyperparameter
or run option; the command line wins over the file, the file over defaults.
Artifacts land in ``<out>/<timestamp>-<command>-seed<seed>/``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time

from ..agent import GATSACController, TrainingError
from ..neural import CheckpointError
from ..sim.config import ConfigError, dump_config
from . import experiments as ex
from .options import AGENT_DEFAULTS, SCENARIO_KEYS, Options, parse_float_list, read_config_file, resolve
from .runs import make_run_dir, write_manifest

logger = logging.getLogger("gatsac")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECKPOINT, EXIT_TRAINING = 0, 2, 3, 4, 5
COMMANDS = ("train", "eval", "baseline", "sweep", "tune")
NORMALIZED_REWARD = "episode reward divided by the number of control steps"


def parse_overrides(tokens):
    """``['--a=1', '--b', '2']`` -> {'a': '1', 'b': '2'}."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or tok == "--":
            raise ConfigError(tok, "expected --key=value")
        body = tok[2:]
        if "=" in body:
            k, v = body.split("=", 1)
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            k, v = body, tokens[i + 1]
            i += 1
        else:
            raise ConfigError(body, "missing value")
        out[k.replace("-", "_")] = v
        i += 1
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="gatsac", description=__doc__.splitlines()[0],
                                epilog="Any scenario, hyperparameter or run option may be given as --key=value.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a GAT-SAC controller (metrics.csv, checkpoint.npz)",
        "eval": "evaluate a checkpoint over seeded runs (eval.csv plus trace/cost/graph/attention dumps)",
        "baseline": "evaluate the fixed-timing controller (eval.csv)",
        "sweep": "CAV penetration x demand sweep (sweep.csv, sweep_summary.csv, SVG plots)",
        "tune": "random hyperparameter search with median pruning (trials.csv, best.cfg)",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name], description=helps[name])
        sp.add_argument("--config", help="key=value config file")
    return p


def _manifest(opts: Options, command, extra=None):
    entries = {"command": command, "seed": opts["seed"], "normalized_reward": NORMALIZED_REWARD}
    entries.update({k: v for k, v in opts.run.items() if k != "seed"})
    entries.update(opts.scenario.to_dict())
    entries.update(opts.agent)
    entries.update(extra or {})
    return entries


def _write_resolved_config(run_dir, opts: Options, skip_agent=False):
    """config.cfg re-runs the command with the same settings via ``--config``."""
    lines = dump_config(opts.scenario)
    if not skip_agent:
        lines += "".join(f"{k}={v}\n" for k, v in opts.agent.items())
    lines += "".join(f"{k}={v}\n" for k, v in opts.run.items() if v is not None)
    (run_dir / "config.cfg").write_text(lines, encoding="utf-8")


def _load_controller(path):
    if path is None:
        raise ConfigError("checkpoint", "a checkpoint path is required")
    return GATSACController.load(path)


def _reject_agent_keys(config_path, overrides):
    given = set(overrides)
    if config_path:
        given |= set(read_config_file(config_path))
    bad = sorted(given & set(AGENT_DEFAULTS))
    if bad:
        raise ConfigError(bad[0], "controller hyperparameters come from the checkpoint")


def _print_aggregate(agg):
    for k in ("reward", "avg_delay", "delay_cav", "delay_hdv", "fairness_ratio", "normalized_violations",
              "throughput_per_min"):
        print(f"  {k:22s} {agg[k]:10.3f} +- {agg[k + '_std']:.3f}")


def cmd_train(config_path, overrides):
    opts = resolve("train", config_path, overrides)
    run_dir = make_run_dir(opts["out"], opts["seed"], "train")
    write_manifest(run_dir, _manifest(opts, "train"))
    _write_resolved_config(run_dir, opts)
    t0 = time.perf_counter()
    _, rows = ex.train(opts.scenario, opts.agent, opts["episodes"], opts["seed"], run_dir, opts["horizon"])
    print(f"trained {len(rows)} episodes in {time.perf_counter() - t0:.0f} s -> {run_dir}")
    if rows:
        last = rows[-min(20, len(rows)):]
        print(f"  last {len(last)} episodes: reward {sum(r['reward'] for r in last) / len(last):.2f}, "
              f"delay {sum(r['delay'] for r in last) / len(last):.2f} s")
    return run_dir


def cmd_eval(config_path, overrides):
    first = resolve("eval", config_path, overrides)
    _reject_agent_keys(config_path, overrides)
    est = _load_controller(first["checkpoint"])
    opts = resolve("eval", config_path, overrides, base_scenario=est.scenario_)
    run_dir = make_run_dir(opts["out"], opts["seed"], "eval")
    write_manifest(run_dir, _manifest(Options(opts.scenario, est.get_params(), opts.run), "eval"))
    _write_resolved_config(run_dir, opts, skip_agent=True)
    _, agg = ex.evaluate(est, opts.scenario, opts["runs"], opts["seed"], opts["horizon"], run_dir)
    print(f"evaluated {opts['runs']} runs -> {run_dir}")
    _print_aggregate(agg)
    return run_dir


def cmd_baseline(config_path, overrides):
    opts = resolve("baseline", config_path, overrides)
    run_dir = make_run_dir(opts["out"], opts["seed"], "baseline")
    write_manifest(run_dir, _manifest(opts, "baseline", {"controller": "fixed"}))
    _write_resolved_config(run_dir, opts)
    _, agg = ex.evaluate(ex.fixed_controller(opts.scenario), opts.scenario, opts["runs"], opts["seed"],
                         opts["horizon"], run_dir)
    print(f"fixed-timing baseline, {opts['runs']} runs -> {run_dir}")
    _print_aggregate(agg)
    return run_dir


def cmd_sweep(config_path, overrides):
    opts = resolve("sweep", config_path, overrides)
    if opts["checkpoint"]:
        _reject_agent_keys(config_path, overrides)
        controller = _load_controller(opts["checkpoint"])
        opts = resolve("sweep", config_path, overrides, base_scenario=controller.scenario_)
        name = "gat-sac"
    else:
        controller = ex.fixed_controller(opts.scenario)
        name = "fixed"
    levels = parse_float_list("levels", opts["levels"])
    densities = parse_float_list("densities", opts["densities"])
    for lv in levels:
        if not 0.0 <= lv <= 1.0:
            raise ConfigError("levels", f"penetration level {lv} outside [0, 1]")
    if opts["runs"] < 1:
        raise ConfigError("runs", "must be >= 1")
    run_dir = make_run_dir(opts["out"], opts["seed"], "sweep")
    write_manifest(run_dir, _manifest(opts, "sweep", {"controller": name}))
    _write_resolved_config(run_dir, opts)
    rows, _ = ex.sweep(controller, opts.scenario, levels, densities, opts["runs"], opts["seed"], opts["horizon"],
                       run_dir, jobs=max(1, opts["jobs"]))
    print(f"sweep ({name}) {len(levels)} levels x {len(densities)} densities x {opts['runs']} runs = "
          f"{len(rows)} rows -> {run_dir}")
    return run_dir


def _parse_inject(text):
    out = {}
    for part in str(text).split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError("inject", f"expected key=value pairs, got {part!r}")
        k, v = (x.strip() for x in part.split("=", 1))
        if k not in AGENT_DEFAULTS:
            raise ConfigError("inject", f"unknown hyperparameter {k!r}")
        out[k] = type(AGENT_DEFAULTS[k])(float(v)) if isinstance(AGENT_DEFAULTS[k], int) else float(v)
    return out


def cmd_tune(config_path, overrides):
    opts = resolve("tune", config_path, overrides)
    r = opts.run
    if r["objective_window"] > r["episodes"]:
        raise ConfigError("objective_window", "longer than the trial length (episodes)")
    inject = _parse_inject(r["inject"]) if r["inject"] else None
    run_dir = make_run_dir(r["out"], r["seed"], "tune")
    write_manifest(run_dir, _manifest(opts, "tune", {"search": "random", "pruner": "median"}))
    _write_resolved_config(run_dir, opts)
    results, best = ex.tune(opts.scenario, opts.agent, r["trials"], r["episodes"], r["seed"], run_dir, r["horizon"],
                            r["prune_at"], r["prune_every"], r["prune_window"], r["min_trials"],
                            r["objective_window"], inject, r["inject_trial"])
    pruned = sum(1 for x in results if x["status"] == "pruned")
    print(f"{len(results)} trials ({pruned} pruned) -> {run_dir}")
    if best is not None:
        print(f"  best trial {best['trial']} objective {best['objective']:.4f} (overlay: best.cfg)")
    return run_dir


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline, "sweep": cmd_sweep, "tune": cmd_tune}


def main(argv=None):
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = parse_overrides(rest)
        HANDLERS[args.command](args.config, overrides)
    except ConfigError as exc:
        print(f"gatsac {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"gatsac {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingError as exc:
        print(f"gatsac {args.command}: training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except OSError as exc:
        print(f"gatsac {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
