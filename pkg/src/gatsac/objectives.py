"""Per-step delay, fairness and safety costs and the scalar reward."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

THROUGHPUT_BONUS = 0.01  # reward per departed vehicle
COST_CSV_HEADER = ("t", "D", "F", "S", "C_total", "reward")


@dataclass(frozen=True)
class CostWeights:
    w_d: float = 1.0
    w_f: float = 0.5
    w_s: float = 2.0
    rlr: float = 1.0      # red-light running coefficient
    ttc: float = 0.5      # time-to-collision coefficient
    hb: float = 0.25      # hard-braking coefficient
    throughput_bonus: float = THROUGHPUT_BONUS

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"cost weight {f.name} must be finite and >= 0, got {v}")

    def scaled(self, c):
        """Objective weights multiplied by ``c``; safety coefficients and bonus unchanged."""
        return CostWeights(self.w_d * c, self.w_f * c, self.w_s * c, self.rlr, self.ttc, self.hb,
                           self.throughput_bonus)


@dataclass
class CostBreakdown:
    D: float
    F: float
    S: float
    C_total: float
    reward: float
    delay_hdv: float = 0.0
    delay_cav: float = 0.0
    t: float = 0.0

    def as_row(self):
        return [self.t, self.D, self.F, self.S, self.C_total, self.reward]


def delay_cost(t, arrivals, freeflow):
    """Mean of max(0, t - arrival - freeflow) over the vehicles given; 0 when empty."""
    arrivals = np.asarray(arrivals, dtype=float)
    if arrivals.size == 0:
        return 0.0
    excess = t - arrivals - np.asarray(freeflow, dtype=float)
    return float(np.mean(np.maximum(0.0, excess)))


def fairness_cost(delay_hdv, delay_cav):
    """|d_HDV - d_CAV| / max(d_HDV, d_CAV), zero if a class is absent (None/NaN) or both are 0."""
    if delay_hdv is None or delay_cav is None:
        return 0.0
    if not (np.isfinite(delay_hdv) and np.isfinite(delay_cav)):
        return 0.0
    top = max(delay_hdv, delay_cav)
    if top <= 0:
        return 0.0
    return float(abs(delay_hdv - delay_cav) / top)


def count_events(events):
    counts = {"RLR": 0, "TTC": 0, "HB": 0}
    for ev in events:
        counts[ev.kind] += 1
    return counts


def safety_cost(events, weights: CostWeights):
    """Weighted count of RLR, TTC and HB events (``events`` may also be a count dict)."""
    c = events if isinstance(events, dict) else count_events(events)
    return weights.rlr * c.get("RLR", 0) + weights.ttc * c.get("TTC", 0) + weights.hb * c.get("HB", 0)


def total_cost_and_reward(D, F, S, weights: CostWeights, departed=0, t=0.0, delay_hdv=0.0, delay_cav=0.0):
    for name, val in (("D", D), ("F", F), ("S", S)):
        if not np.isfinite(val):
            raise ValueError(f"cost component {name} is not finite")
    C = weights.w_d * D + weights.w_f * F + weights.w_s * S
    reward = -C + weights.throughput_bonus * departed
    return CostBreakdown(float(D), float(F), float(S), float(C), float(reward),
                         float(delay_hdv), float(delay_cav), float(t))


def class_mean_delays(delays, is_cav):
    """(mean HDV delay, mean CAV delay); None for an absent class."""
    delays = np.asarray(delays, dtype=float)
    is_cav = np.asarray(is_cav, dtype=bool)
    hdv = float(delays[~is_cav].mean()) if np.any(~is_cav) else None
    cav = float(delays[is_cav].mean()) if np.any(is_cav) else None
    return hdv, cav


def step_cost(sim, events, departed, weights: CostWeights):
    """Cost breakdown of the simulator's current state and the events of the last interval."""
    delays, is_cav = sim.current_delays()
    D = float(delays.mean()) if delays.size else 0.0
    d_hdv, d_cav = class_mean_delays(delays, is_cav)
    F = fairness_cost(d_hdv, d_cav)
    S = safety_cost(events, weights)
    return total_cost_and_reward(D, F, S, weights, departed, sim.t,
                                 d_hdv if d_hdv is not None else 0.0,
                                 d_cav if d_cav is not None else 0.0)


def write_cost_csv(path, breakdowns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COST_CSV_HEADER)
        for b in breakdowns:
            w.writerow([f"{x:.10g}" for x in b.as_row()])


def weights_from_dict(d):
    known = {f.name for f in fields(CostWeights)}
    return CostWeights(**{k: float(v) for k, v in d.items() if k in known})


def weights_to_dict(w: CostWeights):
    return asdict(w)
