"""Planar corridor simulator for closed-loop evaluation and dataset synthesis."""
from .control import DT, ControlConfig, DroneState, control_step, low_pass
from .episode import (
    ConstantPolicy, EpisodeLog, EpisodeResult, ImagePolicy, OraclePolicy, PolicyError, evaluate_episode,
    plot_episodes, run_episode, success_table,
)
from .pilot import OffMapError, PilotConfig, oracle_pilot_command
from .render import DEFAULT_CAMERA, CameraConfig, render_camera
from .world import (
    GeometryError, ObstacleSpec, Rect, UPathGeometry, World, build_upath_world, collision_label,
    disc_collides, disc_hits_rect, forward_range, raycast,
)
