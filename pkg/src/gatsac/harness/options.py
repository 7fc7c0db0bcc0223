"""Option resolution for the CLI: defaults < config file < command-line overrides.

A config file is a flat ``key=value`` list whose keys may be scenario fields,
controller hyperparameters or run options of the command.
"""

from __future__ import annotations

from pathlib import Path

from ..agent import GATSACController
from ..sim.config import ConfigError, SimConfig, coerce_value

SCENARIO_KEYS = tuple(SimConfig().to_dict())
AGENT_DEFAULTS = {k: v for k, v in GATSACController().get_params().items() if k != "random_state"}

_COMMON = {"seed": 0, "out": "runs", "horizon": None}

RUN_DEFAULTS = {
    "train": {**_COMMON, "episodes": 300},
    "eval": {**_COMMON, "checkpoint": None, "runs": 20, "horizon": 1000.0},
    "baseline": {**_COMMON, "runs": 20, "horizon": 1000.0},
    "sweep": {**_COMMON, "checkpoint": None, "levels": "0,0.2,0.4,0.6,0.8,1.0", "densities": "600,1200,1800",
              "runs": 20, "horizon": 1000.0, "jobs": 1},
    "tune": {**_COMMON, "trials": 50, "episodes": 100, "prune_at": 40, "prune_every": 20, "prune_window": 10,
             "min_trials": 2, "objective_window": 50, "inject": None, "inject_trial": None},
}

_RUN_TYPES = {"seed": int, "episodes": int, "runs": int, "jobs": int, "trials": int, "prune_at": int,
              "prune_every": int, "prune_window": int, "min_trials": int, "objective_window": int,
              "inject_trial": int, "horizon": float}


def _coerce_run(key, raw):
    if raw is None or (isinstance(raw, str) and raw.strip().lower() in ("", "none")):
        return None
    kind = _RUN_TYPES.get(key, str)
    try:
        return kind(raw) if kind is not int else int(str(raw).strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def _coerce_agent(key, raw):
    default = AGENT_DEFAULTS[key]
    kind = type(default)
    try:
        return kind(str(raw).strip()) if kind is not int else int(float(str(raw).strip()))
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path):
    """Raw ``key=value`` pairs of a config file (values still strings)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}", f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class Options:
    """Resolved scenario, controller hyperparameters and run options of one command."""

    def __init__(self, scenario: SimConfig, agent: dict, run: dict):
        self.scenario = scenario
        self.agent = agent
        self.run = run

    def __getitem__(self, key):
        return self.run[key]


def resolve(command, config_path=None, overrides=None, base_scenario=None, base_agent=None):
    """Merge the layers for ``command``; unknown keys raise ConfigError.

    ``base_scenario`` / ``base_agent`` sit between the defaults and the file
    (used by ``eval`` to start from the values stored in a checkpoint).
    """
    if command not in RUN_DEFAULTS:
        raise ConfigError("command", f"unknown command {command!r}")
    layers = [dict(base_scenario or {}), dict(base_agent or {})]
    if config_path is not None:
        layers.append(read_config_file(config_path))
    layers.append(dict(overrides or {}))
    scen, agent, run = {}, {}, dict(RUN_DEFAULTS[command])
    for layer in layers:
        for k, v in layer.items():
            if k in SCENARIO_KEYS:
                scen[k] = coerce_value(k, v)
            elif k in AGENT_DEFAULTS:
                agent[k] = _coerce_agent(k, v)
            elif k in run:
                run[k] = _coerce_run(k, v)
            else:
                raise ConfigError(k, f"unknown option for '{command}'")
    return Options(SimConfig(**scen), {**AGENT_DEFAULTS, **agent}, run)


def parse_float_list(key, text):
    try:
        vals = [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise ConfigError(key, f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise ConfigError(key, "empty list")
    return vals
