"""Drone control state machine: speed/yaw-rate mapping, first-order low-pass filters, unicycle step."""
from __future__ import annotations

import math
from dataclasses import dataclass

DT = 0.01  # 100 Hz control tick


@dataclass(frozen=True)
class ControlConfig:
    v_target: float = 0.5
    alpha_v: float = 0.3
    alpha_omega: float = 0.3
    omega_max: float = math.pi / 2
    brake_threshold: float = 0.7
    cnn_fps: float = 139.0

    def __post_init__(self):
        for a in (self.alpha_v, self.alpha_omega):
            if not 0 < a <= 1:
                raise ValueError(f"filter coefficient must be in (0, 1], got {a}")
        if self.cnn_fps <= 0:
            raise ValueError("cnn_fps must be positive")


@dataclass(frozen=True)
class DroneState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v: float = 0.0  # filtered forward speed
    omega: float = 0.0  # filtered yaw rate
    t: float = 0.0


def low_pass(previous: float, target: float, alpha: float) -> float:
    return alpha * target + (1.0 - alpha) * previous


def unfiltered_commands(yaw_pred: float, p_coll: float, cfg: ControlConfig) -> tuple[float, float]:
    v_unfilt = 0.0 if p_coll > cfg.brake_threshold else cfg.v_target * (1.0 - p_coll)
    return v_unfilt, cfg.omega_max * yaw_pred


def control_step(state: DroneState, yaw_pred: float, p_coll: float, cfg: ControlConfig,
                 dt: float = DT) -> DroneState:
    """One 100 Hz tick: map CNN outputs to setpoints, filter them, integrate the pose."""
    v_unfilt, omega_unfilt = unfiltered_commands(yaw_pred, p_coll, cfg)
    v = low_pass(state.v, v_unfilt, cfg.alpha_v)
    omega = low_pass(state.omega, omega_unfilt, cfg.alpha_omega)
    return DroneState(
        x=state.x + v * math.cos(state.theta) * dt,
        y=state.y + v * math.sin(state.theta) * dt,
        theta=state.theta + omega * dt,
        v=v,
        omega=omega,
        t=state.t + dt,
    )
