"""Surrogate-safety event detection between consecutive simulation snapshots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import conflict_matrix

_CONFLICTS = conflict_matrix()
MIN_GAP_CLOSING_SPEED = 0.5


@dataclass(frozen=True)
class SafetyThresholds:
    ttc: float = 1.5
    hb_decel: float = 4.5
    min_gap: float = 2.0


@dataclass
class SafetyEvent:
    kind: str  # "RLR", "TTC" or "HB"
    time: float
    vehicles: tuple
    severity: float
    detail: str = ""

    def __post_init__(self):
        if self.kind not in ("RLR", "TTC", "HB"):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not self.severity > 0:
            raise ValueError("severity must be positive")


@dataclass
class Snapshot:
    """Kinematic state of every vehicle on the lanes at one instant."""

    t: float
    ids: np.ndarray
    lane: np.ndarray
    pos: np.ndarray
    speed: np.ndarray
    acc: np.ndarray
    is_cav: np.ndarray
    green: np.ndarray
    lane_length: float = 300.0
    box_length: float = 20.0
    vehicle_length: float = 5.0
    v0: float = 13.89


def following_pairs(snap):
    """(follower index, leader index) pairs of consecutive vehicles per lane."""
    if snap.ids.size < 2:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    order = np.lexsort((-snap.pos, snap.lane))
    same = snap.lane[order][1:] == snap.lane[order][:-1]
    return order[1:][same], order[:-1][same]


def ttc_violations(snap, thresholds):
    """Closing pairs with time-to-collision (or gap) below threshold.

    Returns a dict ``{(follower_id, leader_id): severity}``.
    """
    f, l = following_pairs(snap)
    if f.size == 0:
        return {}
    gap = snap.pos[l] - snap.vehicle_length - snap.pos[f]
    dv = snap.speed[f] - snap.speed[l]
    closing = dv > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        ttc = np.where(closing, np.maximum(gap, 0.0) / np.where(closing, dv, 1.0), np.inf)
    # the gap criterion ignores the final creep into a standing queue
    intrusion = (gap < thresholds.min_gap) & (dv > MIN_GAP_CLOSING_SPEED)
    bad = closing & ((ttc < thresholds.ttc) | intrusion)
    out = {}
    for k in np.flatnonzero(bad):
        sev = max(thresholds.ttc / max(ttc[k], 1e-3), thresholds.min_gap / max(gap[k], 1e-3))
        out[(int(snap.ids[f[k]]), int(snap.ids[l[k]]))] = float(sev)
    return out


def detect_safety_events(prev: Snapshot, nxt: Snapshot, thresholds: SafetyThresholds):
    """Events that start between ``prev`` and ``nxt``.

    * TTC: a closing leader/follower pair whose TTC falls below the threshold,
      or a vehicle entering the box while a conflicting movement occupies it.
    * HB: realised deceleration at or beyond the hard-braking threshold.
    * RLR: crossing the stop line while the lane's signal (in force during the
      step, ``prev.green``) is not green.

    Each leader/follower pair or braking vehicle is reported once per
    continuous violation episode.
    """
    events = []
    t = nxt.t
    now = ttc_violations(nxt, thresholds)
    before = ttc_violations(prev, thresholds)
    for pair, sev in now.items():
        if pair not in before:
            events.append(SafetyEvent("TTC", t, pair, sev))

    prev_acc = dict(zip(prev.ids.tolist(), prev.acc.tolist()))
    hard = np.flatnonzero(nxt.acc <= -thresholds.hb_decel)
    for k in hard:
        vid = int(nxt.ids[k])
        if prev_acc.get(vid, 0.0) > -thresholds.hb_decel:
            events.append(SafetyEvent("HB", t, (vid,), float(-nxt.acc[k] / thresholds.hb_decel)))

    L = nxt.lane_length
    prev_pos = dict(zip(prev.ids.tolist(), prev.pos.tolist()))
    crossed = [k for k in range(nxt.ids.size)
               if nxt.pos[k] > L and prev_pos.get(int(nxt.ids[k]), np.inf) <= L]
    if crossed:
        in_box = (nxt.pos > L) & (nxt.pos <= L + nxt.box_length)
        for k in crossed:
            vid = int(nxt.ids[k])
            lane = int(nxt.lane[k])
            if not prev.green[lane]:
                events.append(SafetyEvent("RLR", t, (vid,), 1.0 + float(nxt.speed[k]) / nxt.v0))
            rivals = np.flatnonzero(in_box & _CONFLICTS[lane][nxt.lane])
            for r in rivals:
                events.append(SafetyEvent("TTC", t, (vid, int(nxt.ids[r])), 1.0, detail="crossing"))
    return events
