"""Lane-level graph view of a simulation snapshot."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .sim.geometry import N_LANES, N_PHASES, adjacency_pairs, conflict_pairs, lane_name, phase_lane_mask
from .sim.simulator import STOPPED_SPEED

N_FEATURES = 4
JAM_SPACING = 7.0  # vehicle length + jam gap
FEATURE_NAMES = ("v_norm", "density", "cav_ratio", "queue")


def lane_edges():
    """Directed edges ``(i, j)`` meaning ``j`` is in the neighbourhood of ``i``.

    Same-approach neighbours and crossing conflicts in both directions, plus
    one self-loop per lane. Sorted, so the list is identical on every call.
    """
    edges = set((i, i) for i in range(N_LANES))
    for i, j in adjacency_pairs() + conflict_pairs():
        edges.add((i, j))
        edges.add((j, i))
    return np.array(sorted(edges), dtype=np.int64)


EDGES = lane_edges()


def adjacency_mask(edges=None, n_nodes=N_LANES):
    edges = EDGES if edges is None else np.asarray(edges)
    mask = np.zeros((n_nodes, n_nodes), dtype=bool)
    mask[edges[:, 0], edges[:, 1]] = True
    return mask


@dataclass
class TrafficGraph:
    features: np.ndarray          # (N, 4)
    edges: np.ndarray             # (E, 2)
    phase_index: int = 0
    signal_context: np.ndarray | None = None
    time: float = 0.0

    @property
    def n_nodes(self):
        return self.features.shape[0]

    def mask(self):
        return adjacency_mask(self.edges, self.n_nodes)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", *FEATURE_NAMES])
            for i, row in enumerate(self.features):
                w.writerow([lane_name(i), *(f"{x:.6g}" for x in row)])


def queue_length(lane, sim):
    """Number of stopped vehicles (speed below 0.1 m/s) in ``lane``."""
    m = sim.alive & (sim.lane == lane)
    return int(np.sum(sim.speed[m] < STOPPED_SPEED))


def node_features(sim):
    """(12, 4) matrix [mean speed / v0, density / jam density, CAV ratio, queue / capacity].

    An empty lane reads (1, 0, 0, 0).
    """
    cfg = sim.config
    capacity = cfg.lane_length / JAM_SPACING
    X = np.zeros((N_LANES, N_FEATURES))
    X[:, 0] = 1.0
    idx = np.flatnonzero(sim.alive)
    if idx.size == 0:
        return X
    lanes = sim.lane[idx]
    count = np.bincount(lanes, minlength=N_LANES).astype(float)
    speed_sum = np.bincount(lanes, weights=sim.speed[idx] / sim.v0[idx], minlength=N_LANES)
    cav = np.bincount(lanes, weights=sim.is_cav[idx].astype(float), minlength=N_LANES)
    stopped = np.bincount(lanes, weights=(sim.speed[idx] < STOPPED_SPEED).astype(float), minlength=N_LANES)
    busy = count > 0
    X[busy, 0] = speed_sum[busy] / count[busy]
    X[:, 1] = count / capacity
    X[busy, 2] = cav[busy] / count[busy]
    X[:, 3] = stopped / capacity
    return X


def build_graph(sim):
    """Graph snapshot of ``sim``: node features, static edges, signal context."""
    return TrafficGraph(
        features=node_features(sim),
        edges=EDGES,
        phase_index=sim.signal.phase_index,
        signal_context=sim.signal.context(),
        time=sim.t,
    )


_PHASE_MASK = phase_lane_mask()


def readout_matrix(phase_index):
    """(3, 12) pooling weights: all lanes, current-phase lanes, next-phase lanes.

    The first row is the plain mean used as the intersection embedding; the
    other two pool the lanes served by the phase now running (or about to
    run, during its clearance) and by the one after it.
    """
    R = np.full((3, N_LANES), 1.0 / N_LANES)
    for row, k in ((1, phase_index), (2, (phase_index + 1) % N_PHASES)):
        m = _PHASE_MASK[k]
        R[row] = m / m.sum()
    return R


READOUT_ROWS = 3
