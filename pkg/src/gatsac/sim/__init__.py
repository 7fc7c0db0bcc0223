"""Intersection microsimulation: IDM car-following, arrivals, signals, safety events."""

from .config import ConfigError, SimConfig, VehicleClassParams, load_config, save_config
from .geometry import (
    APPROACHES,
    CONFLICT_PAIRS,
    LANE_TYPES,
    MOVEMENTS,
    N_CONFLICTS,
    N_LANES,
    N_PHASES,
    PHASES,
    LaneSpec,
)
from .idm import CollisionError, idm_acceleration, idm_acceleration_array
from .safety import SafetyEvent, SafetyThresholds, Snapshot, detect_safety_events
from .simulator import (
    SIGNAL_CONTEXT_DIM,
    IntersectionSim,
    SignalBounds,
    SignalCommand,
    SignalState,
    StepOutcome,
    init_simulation,
)

__all__ = [
    "APPROACHES", "CONFLICT_PAIRS", "LANE_TYPES", "MOVEMENTS", "N_CONFLICTS", "N_LANES",
    "N_PHASES", "PHASES", "SIGNAL_CONTEXT_DIM", "CollisionError", "ConfigError",
    "IntersectionSim", "LaneSpec", "SafetyEvent", "SafetyThresholds", "SignalBounds",
    "SignalCommand", "SignalState", "SimConfig", "Snapshot", "StepOutcome",
    "VehicleClassParams", "detect_safety_events", "idm_acceleration", "idm_acceleration_array",
    "init_simulation", "load_config", "save_config",
]
