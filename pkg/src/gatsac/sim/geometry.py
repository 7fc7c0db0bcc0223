"""Static layout of the four-approach, twelve-lane intersection.

Lanes are indexed ``approach * 3 + movement`` with approaches ordered
clockwise N, E, S, W and movements left, through, right. Traffic keeps right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

APPROACHES = ("N", "E", "S", "W")
MOVEMENTS = ("left", "through", "right")
LANE_TYPES = ("CAV_only", "HDV_only", "mixed")
CAV_ONLY, HDV_ONLY, MIXED = 0, 1, 2
N_LANES = len(APPROACHES) * len(MOVEMENTS)

# (approach, movement) pairs served by each phase; clearance is all-red.
PHASES = (
    (("N", "through"), ("N", "right"), ("S", "through"), ("S", "right")),
    (("N", "left"), ("S", "left")),
    (("E", "through"), ("E", "right"), ("W", "through"), ("W", "right")),
    (("E", "left"), ("W", "left")),
)
N_PHASES = len(PHASES)


def lane_index(approach, movement):
    return APPROACHES.index(approach) * 3 + MOVEMENTS.index(movement)


def lane_name(lane):
    return f"{APPROACHES[lane // 3]}-{MOVEMENTS[lane % 3]}"


def opposite(approach):
    return APPROACHES[(APPROACHES.index(approach) + 2) % 4]


def from_left(approach):
    """Approach whose traffic arrives from the driver's left."""
    return APPROACHES[(APPROACHES.index(approach) + 1) % 4]


@dataclass
class LaneSpec:
    lane_id: int
    approach: str
    movement: str
    length: float = 300.0
    lane_type: str = "mixed"

    def admits(self, is_cav):
        if self.lane_type == "mixed":
            return True
        return (self.lane_type == "CAV_only") == bool(is_cav)


def default_lanes(length=300.0):
    return [LaneSpec(lane_index(a, m), a, m, length) for a in APPROACHES for m in MOVEMENTS]


def phase_lane_mask():
    """Boolean (P, 12) matrix: lane j is green in phase k."""
    mask = np.zeros((N_PHASES, N_LANES), dtype=bool)
    for k, movements in enumerate(PHASES):
        for a, m in movements:
            mask[k, lane_index(a, m)] = True
    return mask


def conflict_pairs():
    """Crossing-conflict lane pairs ``(i, j)`` with ``i < j``, sorted.

    Crossings at a protected four-leg intersection: perpendicular throughs,
    a left turn against the opposing through and against the through stream
    arriving from the driver's left, and perpendicular left turns.
    Right turns only merge.
    """
    pairs = set()

    def add(a1, m1, a2, m2):
        i, j = lane_index(a1, m1), lane_index(a2, m2)
        pairs.add((min(i, j), max(i, j)))

    for a in APPROACHES:
        add(a, "through", from_left(a), "through")
        add(a, "left", opposite(a), "through")
        add(a, "left", from_left(a), "through")
        add(a, "left", from_left(a), "left")
    return sorted(pairs)


CONFLICT_PAIRS = conflict_pairs()
N_CONFLICTS = len(CONFLICT_PAIRS)


def conflict_matrix():
    m = np.zeros((N_LANES, N_LANES), dtype=bool)
    for i, j in CONFLICT_PAIRS:
        m[i, j] = m[j, i] = True
    return m


def adjacency_pairs():
    """Neighbouring lanes of the same approach, ``(i, j)`` with ``i < j``."""
    out = []
    for a in APPROACHES:
        base = APPROACHES.index(a) * 3
        out += [(base, base + 1), (base + 1, base + 2)]
    return out
