"""Control-interval environment around the intersection simulator.

One environment step applies a controller command and advances the
simulator by ``control_interval`` seconds, accumulating safety events and
departures, then scores the interval with the multi-objective cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import build_graph
from .objectives import CostBreakdown, CostWeights, count_events, step_cost
from .sim.config import SimConfig
from .sim.simulator import IntersectionSim, SignalCommand


@dataclass
class EpisodeMetrics:
    reward: float = 0.0
    steps: int = 0
    throughput: int = 0
    vehicles: int = 0
    avg_delay: float = 0.0
    delay_cav: float = 0.0
    delay_hdv: float = 0.0
    violations: int = 0
    rlr: int = 0
    ttc: int = 0
    hb: int = 0
    duration: float = 0.0
    sum_d: float = 0.0
    sum_f: float = 0.0
    sum_s: float = 0.0

    @property
    def normalized_violations(self):
        """Violations per 100 vehicles."""
        return 100.0 * self.violations / self.vehicles if self.vehicles else 0.0

    @property
    def throughput_per_min(self):
        return 60.0 * self.throughput / self.duration if self.duration > 0 else 0.0

    @property
    def fairness_ratio(self):
        """Mean HDV delay over mean CAV delay (0 when undefined)."""
        return self.delay_hdv / self.delay_cav if self.delay_cav > 0 else 0.0

    @property
    def normalized_reward(self):
        return self.reward / self.steps if self.steps else 0.0

    def reward_under(self, weights: CostWeights):
        """Episode reward recomputed with other w_d, w_f, w_s (the cost is linear in them).

        The per-event safety coefficients are taken as those the episode ran with.
        """
        return (-(weights.w_d * self.sum_d + weights.w_f * self.sum_f + weights.w_s * self.sum_s)
                + weights.throughput_bonus * self.throughput)

    def normalized_reward_under(self, weights: CostWeights):
        return self.reward_under(weights) / self.steps if self.steps else 0.0


@dataclass
class StepResult:
    graph: object
    cost: CostBreakdown
    done: bool
    truncated: bool
    departed: int
    events: list = field(default_factory=list)


class TrafficEnv:
    """Episodic wrapper: ``reset`` then repeated ``step(command)`` until done."""

    def __init__(self, config: SimConfig | None = None, weights: CostWeights | None = None,
                 horizon=None, record_trace=False):
        self.config = config or SimConfig()
        self.weights = weights or CostWeights()
        self.horizon = float(self.config.episode_length if horizon is None else horizon)
        self.sim = IntersectionSim(self.config, record_trace=record_trace)
        self.substeps = max(1, int(round(self.config.control_interval / self.config.dt)))
        self.costs: list[CostBreakdown] = []

    def reset(self, seed=None):
        self.sim.reset(seed)
        self.costs = []
        self.episode_reward = 0.0
        self.steps = 0
        self.last_channelization = 0.0
        return build_graph(self.sim)

    @property
    def t(self):
        return self.sim.t

    def channelization_due(self):
        return self.sim.t - self.last_channelization >= self.config.channelization_period - 1e-9

    def set_lane_types(self, lane_types):
        self.sim.set_lane_types(lane_types)
        self.last_channelization = self.sim.t

    def step(self, command: SignalCommand | None):
        sim = self.sim
        events = []
        departed = 0
        for k in range(self.substeps):
            out = sim.step(command if k == 0 else None)
            events.extend(out.events)
            departed += out.departed
        cost = step_cost(sim, events, departed, self.weights)
        self.costs.append(cost)
        self.episode_reward += cost.reward
        self.steps += 1
        truncated = sim.t >= self.horizon - 1e-9
        return StepResult(build_graph(sim), cost, truncated, truncated, departed, events)

    def metrics(self):
        """Episode summary so far.

        Average delay is taken over every vehicle that entered the system:
        departed vehicles contribute their final delay, the rest their delay
        up to now.
        """
        sim = self.sim
        rec = sim.departed_records
        dep_delay = np.array([r[2] for r in rec], dtype=float)
        dep_cav = np.array([r[1] for r in rec], dtype=bool)
        cur_delay, cur_cav = sim.current_delays()
        delays = np.concatenate([dep_delay, cur_delay])
        cav = np.concatenate([dep_cav, cur_cav])
        counts = count_events(sim.events)
        return EpisodeMetrics(
            reward=self.episode_reward,
            steps=self.steps,
            throughput=sim.departed,
            vehicles=int(delays.size),
            avg_delay=float(delays.mean()) if delays.size else 0.0,
            delay_cav=float(delays[cav].mean()) if np.any(cav) else 0.0,
            delay_hdv=float(delays[~cav].mean()) if np.any(~cav) else 0.0,
            violations=int(sum(counts.values())),
            rlr=counts["RLR"], ttc=counts["TTC"], hb=counts["HB"],
            duration=sim.t,
            sum_d=float(sum(c.D for c in self.costs)),
            sum_f=float(sum(c.F for c in self.costs)),
            sum_s=float(sum(c.S for c in self.costs)),
        )


def run_episode(env: TrafficEnv, controller, seed=None):
    """Roll out ``controller`` (anything with ``begin_episode`` and ``act``) for one episode."""
    graph = env.reset(seed)
    controller.begin_episode(env)
    done = False
    while not done:
        command = controller.act(env, graph)
        res = env.step(command)
        graph = res.graph
        done = res.done
    return env.metrics()
