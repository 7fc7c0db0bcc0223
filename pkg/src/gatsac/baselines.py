"""Fixed-timing signal control."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim.geometry import N_PHASES
from .sim.simulator import SignalBounds, SignalCommand


@dataclass(frozen=True)
class FixedPlan:
    """Cyclic plan: phase ``k`` shows all-red for ``clearances[k]`` then green for ``greens[k]``."""

    greens: tuple = (30.0, 30.0, 30.0, 30.0)
    clearances: tuple = (3.0, 3.0, 3.0, 3.0)

    def __post_init__(self):
        if len(self.greens) != N_PHASES or len(self.clearances) != N_PHASES:
            raise ValueError(f"a plan needs {N_PHASES} greens and clearances")
        if any(g <= 0 for g in self.greens) or any(c < 0 for c in self.clearances):
            raise ValueError("greens must be positive and clearances non-negative")

    @property
    def cycle(self):
        return float(sum(self.greens) + sum(self.clearances))

    def validate(self, bounds: SignalBounds):
        """Raise ValueError if a duration falls outside the per-phase signal bounds."""
        for g in self.greens:
            if not bounds.g_min <= g <= bounds.g_max:
                raise ValueError(f"green {g} outside [{bounds.g_min}, {bounds.g_max}]")
        for c in self.clearances:
            if c < bounds.c_min:
                raise ValueError(f"clearance {c} below {bounds.c_min}")
        return self

    @classmethod
    def from_config(cls, config):
        return cls(tuple(config.greens_plan()), (config.c_min,) * N_PHASES)


def schedule(plan: FixedPlan, t):
    """(phase index, in_clearance, seconds into the interval) at time ``t``."""
    r = float(t) % plan.cycle
    for k in range(N_PHASES):
        c, g = plan.clearances[k], plan.greens[k]
        if r < c:
            return k, True, r
        r -= c
        if r < g:
            return k, False, r
        r -= g
    return N_PHASES - 1, False, plan.greens[-1]


class FixedTimingController:
    """Traffic-independent cyclic controller; keeps all lanes mixed and sets no priorities."""

    name = "fixed"

    def __init__(self, plan: FixedPlan | None = None):
        self.plan = plan or FixedPlan()

    def begin_episode(self, env):
        self.plan.validate(env.sim.bounds)
        env.sim.signal.greens = np.array(self.plan.greens, dtype=float)
        env.sim.signal.clearances = np.array(self.plan.clearances, dtype=float)
        env.sim.set_lane_types(["mixed"] * len(env.sim.lanes))

    def act(self, env=None, graph=None):
        return SignalCommand(greens=np.array(self.plan.greens, dtype=float), switch=False)
