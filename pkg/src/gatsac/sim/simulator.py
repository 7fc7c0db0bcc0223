"""Fixed-timestep microsimulation of the signalised intersection.

Vehicles live in fixed-capacity slot arrays so that one step is a handful of
vectorised numpy operations. Each lane runs from its entry (position 0) to the
stop line at ``lane_length`` and continues ``box_length`` metres through the
intersection box, after which the vehicle departs.

Perception delay is modelled with a short ring buffer of past positions,
speeds and signal indications: a vehicle with a delay of ``d`` steps reacts to
where its leader was, how fast it was going and what the signal showed ``d``
steps ago, combined with its own current speed and position.
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import SimConfig
from .geometry import (
    CONFLICT_PAIRS,
    MOVEMENTS,
    N_CONFLICTS,
    N_LANES,
    N_PHASES,
    default_lanes,
    phase_lane_mask,
)
from .idm import idm_acceleration_array
from .safety import SafetyEvent, SafetyThresholds, Snapshot, detect_safety_events

STOPPED_SPEED = 0.1
_EPS = 1e-6
_PHASE_MASK = phase_lane_mask()
_CONFLICT_I = np.array([p[0] for p in CONFLICT_PAIRS])
_CONFLICT_J = np.array([p[1] for p in CONFLICT_PAIRS])


@dataclass
class SignalBounds:
    g_min: float = 5.0
    g_max: float = 60.0
    c_min: float = 3.0
    t_min: float = 30.0
    t_max: float = 120.0


@dataclass
class SignalState:
    """Phase ``k`` runs an all-red clearance of ``clearances[k]`` then ``greens[k]`` of green."""

    greens: np.ndarray
    clearances: np.ndarray
    bounds: SignalBounds
    phase_index: int = 0
    phase_elapsed: float = 0.0
    in_clearance: bool = True
    switches: int = 0

    def green_mask(self):
        if self.in_clearance:
            return np.zeros(N_LANES, dtype=bool)
        return _PHASE_MASK[self.phase_index].copy()

    def set_greens(self, greens):
        g = np.asarray(greens, dtype=float)
        if g.shape != (N_PHASES,):
            raise ValueError(f"expected {N_PHASES} greens, got shape {g.shape}")
        self.greens = np.clip(g, self.bounds.g_min, self.bounds.g_max)

    def request_switch(self):
        """End the current green early if the minimum green has elapsed."""
        if not self.in_clearance and self.phase_elapsed >= self.bounds.g_min - _EPS:
            self._next_phase()
            return True
        return False

    def _next_phase(self):
        self.phase_index = (self.phase_index + 1) % N_PHASES
        self.in_clearance = True
        self.phase_elapsed = 0.0
        self.switches += 1

    def advance(self, dt):
        self.phase_elapsed += dt
        if self.in_clearance:
            if self.phase_elapsed >= self.clearances[self.phase_index] - _EPS:
                self.in_clearance = False
                self.phase_elapsed = 0.0
        elif self.phase_elapsed >= self.greens[self.phase_index] - _EPS:
            self._next_phase()

    def context(self):
        """Signal features for the policy: phase one-hot, clearance flag, timers."""
        onehot = np.zeros(N_PHASES)
        onehot[self.phase_index] = 1.0
        g_max = self.bounds.g_max
        green_elapsed = 0.0 if self.in_clearance else self.phase_elapsed
        return np.concatenate([onehot, [float(self.in_clearance), green_elapsed / g_max,
                                        self.greens[self.phase_index] / g_max]])


SIGNAL_CONTEXT_DIM = N_PHASES + 3


@dataclass
class SignalCommand:
    """Decoded controller output applied at a control step."""

    greens: np.ndarray
    switch: bool = False
    lane_weights: np.ndarray | None = None
    conflict_priority: np.ndarray | None = None


@dataclass
class StepOutcome:
    time: float
    departed: int = 0
    events: list = field(default_factory=list)
    waiting_cav: float = 0.0
    waiting_hdv: float = 0.0
    departed_delays: list = field(default_factory=list)


@dataclass
class _Pending:
    vid: int
    is_cav: bool
    arrival: float
    noise: float


class IntersectionSim:
    """Mutable simulation state plus the step function.

    ``reset`` (called by the constructor) gives an empty intersection at
    ``t = 0`` with phase 0 in clearance. All randomness flows from one
    ``numpy.random.Generator`` seeded with ``config.rng_seed``.
    """

    def __init__(self, config: SimConfig | None = None, capacity=256, record_trace=False):
        self.config = config or SimConfig()
        self.record_trace = record_trace
        self._capacity0 = capacity
        self.reset()

    # ------------------------------------------------------------------ setup
    def reset(self, seed=None):
        cfg = self.config
        self.seed = cfg.rng_seed if seed is None else int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.t = 0.0
        self.step_count = 0
        self.lanes = default_lanes(cfg.lane_length)
        self.thresholds = SafetyThresholds(cfg.ttc_threshold, cfg.hb_decel_threshold, cfg.min_gap)
        self.bounds = SignalBounds(cfg.g_min, cfg.g_max, cfg.c_min, cfg.t_min, cfg.t_max)
        self.signal = SignalState(np.array(cfg.greens_plan()), np.full(N_PHASES, cfg.c_min), self.bounds)
        self.lane_weights = np.zeros(N_LANES)
        self.conflict_priority = np.zeros(N_CONFLICTS)
        self.cav_params = cfg.cav_params
        self.hdv_params = cfg.hdv_params
        self._cav_delay = max(1, int(round(max(self.cav_params.reaction_time, cfg.v2i_period) / cfg.dt)))
        self._hdv_delay = max(1, int(round(self.hdv_params.reaction_time / cfg.dt)))
        self.hist_len = max(self._cav_delay, self._hdv_delay) + 1
        self._alloc(self._capacity0)
        self.hptr = 0
        self.hist_green[:] = self.signal.green_mask()
        self.pending = [deque() for _ in range(N_LANES)]
        self.next_id = 0
        self.spawned = 0
        self.departed = 0
        self.departed_records = []
        self.events = []
        self._overlap_pairs = set()
        self.trace = []

    def _alloc(self, cap):
        self.capacity = cap
        self.alive = np.zeros(cap, dtype=bool)
        self.vid = np.full(cap, -1, dtype=np.int64)
        self.is_cav = np.zeros(cap, dtype=bool)
        self.lane = np.zeros(cap, dtype=np.int64)
        self.pos = np.zeros(cap)
        self.speed = np.zeros(cap)
        self.acc = np.zeros(cap)
        self.arrival = np.zeros(cap)
        self.freeflow = np.zeros(cap)
        self.a_max = np.ones(cap)
        self.b = np.ones(cap)
        self.v0 = np.ones(cap)
        self.s0 = np.ones(cap)
        self.T = np.ones(cap)
        self.delta = np.full(cap, 4.0)
        self.delay_steps = np.ones(cap, dtype=np.int64)
        self.decided = np.zeros(cap, dtype=bool)
        self.committed = np.zeros(cap, dtype=bool)
        self.hist_pos = np.zeros((self.hist_len, cap))
        self.hist_speed = np.zeros((self.hist_len, cap))
        self.hist_green = np.zeros((self.hist_len, N_LANES), dtype=bool)

    def _grow(self):
        old = {name: getattr(self, name) for name in (
            "alive", "vid", "is_cav", "lane", "pos", "speed", "acc", "arrival", "freeflow",
            "a_max", "b", "v0", "s0", "T", "delta", "delay_steps", "decided", "committed")}
        hp, hs, hg = self.hist_pos, self.hist_speed, self.hist_green
        n = self.capacity
        self._alloc(2 * n)
        for name, arr in old.items():
            getattr(self, name)[:n] = arr
        self.hist_pos[:, :n] = hp
        self.hist_speed[:, :n] = hs
        self.hist_green[:] = hg

    # ------------------------------------------------------------- vehicles
    def _free_slot(self):
        free = np.flatnonzero(~self.alive)
        if free.size == 0:
            self._grow()
            free = np.flatnonzero(~self.alive)
        return int(free[0])

    def add_vehicle(self, lane, pos, speed, is_cav, arrival=None, headway_factor=1.0, vid=None):
        """Place a vehicle directly (used by spawning and by tests)."""
        s = self._free_slot()
        p = self.cav_params if is_cav else self.hdv_params
        if vid is None:
            vid = self.next_id
            self.next_id += 1
        self.alive[s] = True
        self.vid[s] = vid
        self.is_cav[s] = bool(is_cav)
        self.lane[s] = int(lane)
        self.pos[s] = float(pos)
        self.speed[s] = float(speed)
        self.acc[s] = 0.0
        self.arrival[s] = self.t if arrival is None else float(arrival)
        self.freeflow[s] = self.config.lane_length / p.desired_speed
        self.a_max[s] = p.max_accel
        self.b[s] = p.comfortable_decel
        self.v0[s] = p.desired_speed
        self.s0[s] = p.min_gap
        self.T[s] = p.desired_headway * headway_factor
        self.delta[s] = p.accel_exponent
        self.delay_steps[s] = self._cav_delay if is_cav else self._hdv_delay
        self.decided[s] = False
        self.committed[s] = False
        self.hist_pos[:, s] = pos
        self.hist_speed[:, s] = speed
        return vid

    @property
    def n_present(self):
        return int(self.alive.sum())

    @property
    def n_queued_outside(self):
        return sum(len(q) for q in self.pending)

    def lane_vehicles(self, lane):
        """Slots of vehicles in ``lane`` ordered front to back."""
        idx = np.flatnonzero(self.alive & (self.lane == lane))
        return idx[np.argsort(-self.pos[idx], kind="stable")]

    def current_delays(self):
        """Delays max(0, t - arrival - freeflow) of every vehicle in the system.

        Returns ``(delays, is_cav)`` covering vehicles on the lanes and those
        waiting to enter.
        """
        idx = np.flatnonzero(self.alive)
        d = np.maximum(0.0, self.t - self.arrival[idx] - self.freeflow[idx])
        cav = self.is_cav[idx]
        pend = [p for q in self.pending for p in q]
        if pend:
            ff_cav = self.config.lane_length / self.cav_params.desired_speed
            ff_hdv = self.config.lane_length / self.hdv_params.desired_speed
            pd = np.array([max(0.0, self.t - p.arrival - (ff_cav if p.is_cav else ff_hdv)) for p in pend])
            pc = np.array([p.is_cav for p in pend])
            d = np.concatenate([d, pd])
            cav = np.concatenate([cav, pc])
        return d, cav

    # ---------------------------------------------------------------- control
    def apply_command(self, cmd: SignalCommand | None):
        if cmd is None:
            return
        self.signal.set_greens(cmd.greens)
        if cmd.lane_weights is not None:
            self.lane_weights = np.asarray(cmd.lane_weights, dtype=float).copy()
        if cmd.conflict_priority is not None:
            self.conflict_priority = np.asarray(cmd.conflict_priority, dtype=float).copy()
        if cmd.switch:
            self.signal.request_switch()
        # a green that is already longer than its new target ends now
        sig = self.signal
        if not sig.in_clearance and sig.phase_elapsed >= sig.greens[sig.phase_index] - _EPS:
            sig._next_phase()

    def set_lane_types(self, lane_types):
        for spec, kind in zip(self.lanes, lane_types):
            spec.lane_type = kind

    def lane_types(self):
        return [spec.lane_type for spec in self.lanes]

    # ---------------------------------------------------------------- spawning
    def _route(self, approach_idx, movement_idx, is_cav):
        base = approach_idx * 3
        lane = base + movement_idx
        if self.lanes[lane].admits(is_cav):
            return lane
        options = [base + m for m in range(3) if self.lanes[base + m].admits(is_cav)]
        if not options:
            return lane
        w = self.lane_weights[options]
        return options[int(np.argmax(w))]

    def spawn_arrivals(self):
        """Draw this step's Poisson arrivals and insert waiting vehicles where there is room."""
        cfg = self.config
        n = self.rng.poisson(cfg.demand / 3600.0 * cfg.dt) if cfg.demand > 0 else 0
        if n:
            approach = self.rng.integers(0, 4, size=n)
            movement = self.rng.choice(3, size=n, p=np.array(cfg.movement_split))
            cav = self.rng.random(n) < cfg.cav_penetration
            noise = self.rng.standard_normal(n)
            for a, m, c, z in zip(approach, movement, cav, noise):
                lane = self._route(int(a), int(m), bool(c))
                factor = 1.0 if c else max(0.3, 1.0 + cfg.hdv_headway_noise * float(z))
                self.pending[lane].append(_Pending(self.next_id, bool(c), self.t, factor))
                self.next_id += 1
                self.spawned += 1
        self._insert_pending()

    def _insert_pending(self):
        cfg = self.config
        for lane in range(N_LANES):
            q = self.pending[lane]
            if not q:
                continue
            idx = np.flatnonzero(self.alive & (self.lane == lane))
            head = q[0]
            p = self.cav_params if head.is_cav else self.hdv_params
            if idx.size == 0:
                v_ins = p.desired_speed
            else:
                last = idx[np.argmin(self.pos[idx])]
                gap = self.pos[last] - cfg.vehicle_length
                if gap < p.min_gap:
                    continue
                room = gap - p.min_gap
                T = p.desired_headway * head.noise
                v_ins = min(p.desired_speed, room / T,
                            self.speed[last] + math.sqrt(2.0 * p.comfortable_decel * room))
            q.popleft()
            self.add_vehicle(lane, 0.0, max(v_ins, 0.0), head.is_cav, arrival=head.arrival,
                             headway_factor=head.noise, vid=head.vid)

    # ------------------------------------------------------------------- step
    def snapshot(self):
        idx = np.flatnonzero(self.alive)
        return Snapshot(
            t=self.t, ids=self.vid[idx].copy(), lane=self.lane[idx].copy(), pos=self.pos[idx].copy(),
            speed=self.speed[idx].copy(), acc=self.acc[idx].copy(), is_cav=self.is_cav[idx].copy(),
            green=self.signal.green_mask(), lane_length=self.config.lane_length,
            box_length=self.config.box_length, vehicle_length=self.config.vehicle_length,
            v0=self.cav_params.desired_speed)

    def _blocked_lanes(self):
        """Lanes whose entrants must yield to a conflicting vehicle in the box."""
        cfg = self.config
        L = cfg.lane_length
        in_box = self.alive & (self.pos > L)
        occupied = np.zeros(N_LANES, dtype=bool)
        if in_box.any():
            occupied[np.unique(self.lane[in_box])] = True
        blocked = np.zeros(N_LANES, dtype=bool)
        if not occupied.any():
            return blocked
        pr = self.conflict_priority
        # lane i yields to an occupied j unless i holds strict priority (pr > 0)
        blocked_i = occupied[_CONFLICT_J] & ~(pr > 0)
        blocked_j = occupied[_CONFLICT_I] & ~(pr < 0)
        np.logical_or.at(blocked, _CONFLICT_I, blocked_i)
        np.logical_or.at(blocked, _CONFLICT_J, blocked_j)
        return blocked

    def step(self, command: SignalCommand | None = None) -> StepOutcome:
        """Advance by one ``dt``. ``command`` (if given) is applied first."""
        cfg = self.config
        dt = cfg.dt
        L = cfg.lane_length
        vlen = cfg.vehicle_length
        self.apply_command(command)
        prev = self.snapshot()
        green = prev.green
        H = self.hist_len
        self.hist_green[self.hptr] = green
        outcome = StepOutcome(time=self.t + dt)

        idx = np.flatnonzero(self.alive)
        if idx.size:
            order = np.lexsort((-self.pos[idx], self.lane[idx]))
            s = idx[order]
            lane = self.lane[s]
            same = np.zeros(s.size, dtype=bool)
            same[1:] = lane[1:] == lane[:-1]
            leader = np.where(same, np.roll(s, 1), -1)
            has_leader = leader >= 0

            pos = self.pos[s]
            v = self.speed[s]
            rows = (self.hptr - self.delay_steps[s]) % H
            lead_slot = np.where(has_leader, leader, 0)
            lead_pos = self.hist_pos[rows, lead_slot]
            lead_v = self.hist_speed[rows, lead_slot]
            gap = np.where(has_leader, lead_pos - vlen - pos, np.inf)
            dv = np.where(has_leader, v - lead_v, 0.0)

            before = pos <= L
            seen_green = self.hist_green[rows, lane]
            b = self.b[s]
            stop_dist = v * v / (2.0 * b)
            to_line = L - pos
            # commit-or-stop decision, taken once per perceived red
            fresh = before & ~seen_green & ~self.decided[s]
            self.committed[s[fresh]] = to_line[fresh] < stop_dist[fresh]
            self.decided[s[fresh]] = True
            reset = before & seen_green
            self.decided[s[reset]] = False
            self.committed[s[reset]] = False
            blocked = self._blocked_lanes()[lane]
            must_stop = before & ((~seen_green & ~self.committed[s]) | (blocked & (to_line > stop_dist)))
            stop_gap = np.maximum(to_line, 1e-3)
            use_stop = must_stop & (stop_gap < gap)
            gap = np.where(use_stop, stop_gap, gap)
            dv = np.where(use_stop, v, dv)

            a = idm_acceleration_array(v, gap, dv, self.a_max[s], b, self.v0[s], self.s0[s],
                                       self.T[s], self.delta[s], cfg.emergency_decel)
            v_new = v + a * dt
            stopping = v_new < 0
            dx = np.where(stopping, np.where(a < 0, -v * v / (2.0 * np.where(a < 0, a, -1.0)), 0.0),
                          v * dt + 0.5 * a * dt * dt)
            v_new = np.maximum(v_new, 0.0)
            raw = pos + dx

            # minimum-gap enforcement, lane by lane (front to back)
            final = raw.copy()
            starts = np.flatnonzero(~same)
            ends = np.append(starts[1:], s.size)
            for st, en in zip(starts, ends):
                if en - st < 2:
                    continue
                rank = np.arange(en - st) * vlen
                final[st:en] = np.minimum.accumulate(raw[st:en] + rank) - rank
            clamped = final < raw - 1e-12
            if clamped.any():
                # a clamped follower cannot be faster than its (final) leader
                for k in np.flatnonzero(clamped):
                    v_new[k] = min(v_new[k], v_new[k - 1])
            raw_gap = np.where(has_leader, np.roll(raw, 1) - vlen - raw, np.inf)
            overlaps = set()
            for k in np.flatnonzero(raw_gap < 0):
                pair = (int(self.vid[s[k]]), int(self.vid[s[k - 1]]))
                overlaps.add(pair)
                if pair not in self._overlap_pairs:
                    outcome.events.append(SafetyEvent(
                        "TTC", self.t + dt, pair, 10.0 + float(-raw_gap[k]), detail="collision"))
            self._overlap_pairs = overlaps

            self.acc[s] = (v_new - v) / dt
            self.speed[s] = v_new
            self.pos[s] = final

            stopped = v_new < STOPPED_SPEED
            cav = self.is_cav[s]
            outcome.waiting_cav = float(np.sum(stopped & cav)) * dt
            outcome.waiting_hdv = float(np.sum(stopped & ~cav)) * dt
        else:
            self._overlap_pairs = set()

        self.t = round(self.t + dt, 9)
        self.step_count += 1
        self.signal.advance(dt)

        nxt = self.snapshot()
        nxt.green = green
        outcome.events.extend(detect_safety_events(prev, nxt, self.thresholds))

        # departures
        gone = np.flatnonzero(self.alive & (self.pos > L + cfg.box_length))
        for k in gone:
            d = max(0.0, self.t - self.arrival[k] - self.freeflow[k])
            rec = (int(self.vid[k]), bool(self.is_cav[k]), float(d), int(self.lane[k]))
            self.departed_records.append(rec)
            outcome.departed_delays.append(rec)
        self.alive[gone] = False
        self.departed += int(gone.size)
        outcome.departed = int(gone.size)

        self.spawn_arrivals()

        self.hptr = (self.hptr + 1) % H
        self.hist_pos[self.hptr] = self.pos
        self.hist_speed[self.hptr] = self.speed
        self.events.extend(outcome.events)
        if self.record_trace:
            self.sample_trace()
        return outcome

    def run(self, n_steps, command=None):
        outcomes = [self.step(command)]
        outcomes += [self.step() for _ in range(n_steps - 1)]
        return outcomes

    # -------------------------------------------------------------- bookkeeping
    def conservation_holds(self):
        return self.spawned == self.departed + self.n_present + self.n_queued_outside

    def state_digest(self):
        """Stable hash of the full dynamic state (for determinism checks)."""
        h = hashlib.sha256()
        idx = np.flatnonzero(self.alive)
        for arr in (self.vid[idx], self.lane[idx], self.pos[idx], self.speed[idx], self.acc[idx],
                    self.is_cav[idx], self.T[idx]):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(np.array([self.t, self.signal.phase_index, self.signal.phase_elapsed,
                           self.spawned, self.departed, len(self.events)]).tobytes())
        return h.hexdigest()

    def sample_trace(self):
        """Append the current state of every vehicle to ``trace``."""
        for k in np.flatnonzero(self.alive):
            self.trace.append((round(self.t, 6), int(self.vid[k]), "CAV" if self.is_cav[k] else "HDV",
                               int(self.lane[k]), float(self.pos[k]), float(self.speed[k]),
                               float(self.acc[k])))

    def export_trace(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "vehicle_id", "class", "lane", "position", "speed", "accel"])
            w.writerows(self.trace)


def init_simulation(config: SimConfig, **kwargs) -> IntersectionSim:
    return IntersectionSim(config, **kwargs)


def movement_of_lane(lane):
    return MOVEMENTS[lane % 3]
