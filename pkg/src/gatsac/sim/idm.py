"""Intelligent Driver Model acceleration law."""

from __future__ import annotations

import math

import numpy as np

EMERGENCY_DECEL = 9.0


class CollisionError(ValueError):
    """The follower already overlaps its leader (gap <= 0)."""


def desired_gap(v, dv, p):
    """s*(v, dv) = s0 + vT + v dv / (2 sqrt(a b))."""
    return p.min_gap + v * p.desired_headway + v * dv / (2.0 * math.sqrt(p.max_accel * p.comfortable_decel))


def idm_acceleration(v, gap, dv, p, emergency_decel=EMERGENCY_DECEL):
    """IDM acceleration for one vehicle.

    Args:
        v: own speed (m/s).
        gap: bumper-to-bumper distance to the leader (m); ``math.inf`` for free road.
        dv: approach rate v - v_leader (m/s).
        p: VehicleClassParams.
        emergency_decel: lower clamp on the result (positive number).

    Raises:
        CollisionError: if ``gap <= 0``.
    """
    if gap <= 0:
        raise CollisionError(f"gap {gap} <= 0")
    free = (v / p.desired_speed) ** p.accel_exponent
    interaction = 0.0 if math.isinf(gap) else (max(desired_gap(v, dv, p), 0.0) / gap) ** 2
    return max(p.max_accel * (1.0 - free - interaction), -emergency_decel)


def idm_acceleration_array(v, gap, dv, a_max, b, v0, s0, T, delta, emergency_decel=EMERGENCY_DECEL):
    """Vectorised IDM. ``gap`` may hold ``inf``; gaps <= 0 map to ``-emergency_decel``."""
    v = np.asarray(v, dtype=float)
    gap = np.asarray(gap, dtype=float)
    s_star = np.maximum(s0 + v * T + v * dv / (2.0 * np.sqrt(a_max * b)), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.isinf(gap), 0.0, s_star / np.where(gap > 0, gap, 1.0))
    acc = a_max * (1.0 - (v / v0) ** delta - ratio ** 2)
    acc = np.where(gap > 0, acc, -emergency_decel)
    return np.maximum(acc, -emergency_decel)


def equilibrium_gap(v, p):
    """Gap at which a vehicle following an equal-speed leader has zero acceleration."""
    frac = 1.0 - (v / p.desired_speed) ** p.accel_exponent
    if frac <= 0:
        return math.inf
    return (p.min_gap + v * p.desired_headway) / math.sqrt(frac)
