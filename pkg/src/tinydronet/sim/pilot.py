"""Oracle pilot: pure-pursuit heading control toward a lookahead point on the centerline."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .world import World


class OffMapError(ValueError):
    pass


@dataclass(frozen=True)
class PilotConfig:
    lookahead: float = 0.7
    gain: float = 2.0  # yaw command per radian of heading error
    deadband: float = 0.05
    v_target: float = 0.5
    min_speed_fraction: float = 0.3


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def oracle_pilot_command(world: World, pose, cfg: PilotConfig = PilotConfig()) -> tuple[float, float]:
    """Return ``(yaw_cmd, v_cmd)``; ``yaw_cmd`` in [-1, 1], positive turns right.

    Small commands inside the deadband are zeroed, as a human pilot leaves the
    stick centred on straight stretches.
    """
    x, y, theta = pose[:3]
    if not world.inside(x, y):
        raise OffMapError(f"pose ({x:.2f}, {y:.2f}) is outside the world")
    s, _ = world.project(x, y)
    tx, ty = world.point_at(s + cfg.lookahead)
    err = wrap_angle(math.atan2(ty - y, tx - x) - theta)
    yaw = float(np.clip(cfg.gain * err, -1.0, 1.0))
    if abs(yaw) < cfg.deadband:
        yaw = 0.0
    v = cfg.v_target * max(cfg.min_speed_fraction, math.cos(min(abs(err), math.pi / 2)))
    return yaw, v
