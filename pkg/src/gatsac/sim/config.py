"""Scenario configuration and the flat ``key=value`` scenario file format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class VehicleClassParams:
    reaction_time: float
    desired_headway: float
    max_accel: float
    comfortable_decel: float
    min_gap: float
    desired_speed: float
    accel_exponent: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f.name, f"must be positive, got {v!r}")


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    demand: float = 1200.0
    cav_penetration: float = 0.5
    episode_length: float = 600.0
    split_left: float = 0.25
    split_through: float = 0.60
    split_right: float = 0.15
    rng_seed: int = 0
    # CAV
    cav_reaction_time: float = 0.1
    cav_desired_headway: float = 0.8
    cav_max_accel: float = 2.0
    cav_comfortable_decel: float = 3.0
    cav_min_gap: float = 2.0
    cav_desired_speed: float = 13.89
    cav_accel_exponent: float = 4.0
    # HDV
    hdv_reaction_time: float = 1.5
    hdv_desired_headway: float = 1.5
    hdv_max_accel: float = 1.5
    hdv_comfortable_decel: float = 2.0
    hdv_min_gap: float = 2.0
    hdv_desired_speed: float = 13.89
    hdv_accel_exponent: float = 4.0
    hdv_headway_noise: float = 0.10
    # safety
    ttc_threshold: float = 1.5
    hb_decel_threshold: float = 4.5
    min_gap: float = 2.0
    emergency_decel: float = 9.0
    v2i_period: float = 0.1
    # geometry
    lane_length: float = 300.0
    box_length: float = 20.0
    vehicle_length: float = 5.0
    # signal bounds
    g_min: float = 5.0
    g_max: float = 60.0
    c_min: float = 3.0
    t_min: float = 30.0
    t_max: float = 120.0
    fixed_greens: str = "30,30,30,30"
    # control cadence
    control_interval: float = 5.0
    channelization_period: float = 60.0

    def __post_init__(self):
        positive = ("dt", "episode_length", "lane_length", "box_length", "vehicle_length",
                    "ttc_threshold", "hb_decel_threshold", "emergency_decel", "v2i_period",
                    "g_min", "g_max", "c_min", "t_min", "t_max", "control_interval",
                    "channelization_period")
        for name in positive:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(name, f"must be positive, got {v!r}")
        if not (math.isfinite(self.demand) and self.demand >= 0):
            raise ConfigError("demand", f"must be >= 0, got {self.demand!r}")
        if not 0.0 <= self.cav_penetration <= 1.0:
            raise ConfigError("cav_penetration", f"must lie in [0, 1], got {self.cav_penetration!r}")
        for name in ("split_left", "split_through", "split_right", "hdv_headway_noise", "min_gap"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        total = self.split_left + self.split_through + self.split_right
        if abs(total - 1.0) > 1e-9:
            raise ConfigError("split_through", f"movement fractions sum to {total}, not 1")
        if self.g_min > self.g_max:
            raise ConfigError("g_min", "exceeds g_max")
        if self.t_min > self.t_max:
            raise ConfigError("t_min", "exceeds t_max")
        if self.control_interval < self.dt:
            raise ConfigError("control_interval", "shorter than dt")
        # class parameter checks (raise with prefixed field names)
        for prefix in ("cav", "hdv"):
            try:
                self.class_params(prefix)
            except ConfigError as exc:
                raise ConfigError(f"{prefix}_{exc.field}", str(exc)) from None
        cav, hdv = self.cav_params, self.hdv_params
        if not cav.reaction_time < hdv.reaction_time:
            raise ConfigError("cav_reaction_time", "CAV reaction time must be below the HDV one")
        if not cav.desired_headway < hdv.desired_headway:
            raise ConfigError("cav_desired_headway", "CAV headway must be below the HDV one")
        self.greens_plan()

    def class_params(self, prefix):
        return VehicleClassParams(
            reaction_time=getattr(self, f"{prefix}_reaction_time"),
            desired_headway=getattr(self, f"{prefix}_desired_headway"),
            max_accel=getattr(self, f"{prefix}_max_accel"),
            comfortable_decel=getattr(self, f"{prefix}_comfortable_decel"),
            min_gap=getattr(self, f"{prefix}_min_gap"),
            desired_speed=getattr(self, f"{prefix}_desired_speed"),
            accel_exponent=getattr(self, f"{prefix}_accel_exponent"),
        )

    @property
    def cav_params(self):
        return self.class_params("cav")

    @property
    def hdv_params(self):
        return self.class_params("hdv")

    @property
    def movement_split(self):
        return (self.split_left, self.split_through, self.split_right)

    def greens_plan(self):
        try:
            greens = tuple(float(x) for x in str(self.fixed_greens).split(",") if x.strip())
        except ValueError:
            raise ConfigError("fixed_greens", f"not a comma-separated list: {self.fixed_greens!r}") from None
        if len(greens) != 4:
            raise ConfigError("fixed_greens", "need one green per phase (4)")
        return greens

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}


def coerce_value(key, raw):
    """Parse a string value for ``key`` according to the SimConfig field type."""
    if key not in _FIELD_TYPES:
        raise ConfigError(key, "unknown configuration key")
    kind = _FIELD_TYPES[key]
    raw = str(raw).strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        values[key] = coerce_value(key, value)
    return values


def load_config(path, overrides=None):
    """Read a ``key=value`` scenario file; ``overrides`` win over file values."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    values = parse_config_text(text)
    for k, v in (overrides or {}).items():
        values[k] = coerce_value(k, v)
    return SimConfig(**values)


def dump_config(config):
    return "".join(f"{k}={v}\n" for k, v in config.to_dict().items())


def save_config(config, path):
    Path(path).write_text(dump_config(config), encoding="utf-8")
