"""Column-raycast grayscale camera: a synthetic stand-in for the 200x200 crop."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .world import OBSTACLE, Rect, World, raycast


@dataclass(frozen=True)
class CameraConfig:
    width: int = 200
    height: int = 200
    fov_deg: float = 60.0
    cam_height: float = 0.5
    wall_height: float = 2.0
    obstacle_height: float = 1.2
    wall_shade: float = 160.0
    obstacle_shade: float = 64.0
    floor_shade: float = 110.0
    sky_shade: float = 220.0
    side_face_factor: float = 0.82
    haze_shade: float = 128.0
    haze_range: float = 6.0  # e-folding distance of the fade toward haze_shade [m]
    max_range: float = 30.0

    @property
    def focal(self) -> float:
        return (self.width / 2) / math.tan(math.radians(self.fov_deg) / 2)

    def column_offsets(self) -> np.ndarray:
        """Ray angle offset per column; positive offsets look right (clockwise)."""
        u = np.arange(self.width) + 0.5 - self.width / 2
        return np.arctan(u / self.focal)


DEFAULT_CAMERA = CameraConfig()


def haze(base: np.ndarray, d: np.ndarray, camera: CameraConfig = DEFAULT_CAMERA) -> np.ndarray:
    """Fade a surface shade toward the haze level with distance: near surfaces keep their contrast."""
    w = np.exp(-np.asarray(d) / camera.haze_range)
    return camera.haze_shade + (np.asarray(base) - camera.haze_shade) * w


def render_camera(world: World, pose, camera: CameraConfig = DEFAULT_CAMERA,
                  extra: Sequence[Rect] = (), noise_std: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Render a ``(height, width)`` uint8 image from ``pose = (x, y, theta)``.

    Surfaces fade toward a haze level with perpendicular distance; obstacles use a
    darker base shade than walls and are shorter, so they stand out against the corridor.
    """
    x, y, theta = pose[:3]
    rects = (*world.rects, *extra)
    offsets = camera.column_offsets()
    dist, idx, face = raycast(rects, x, y, theta + offsets, camera.max_range)
    perp = np.maximum(dist * np.cos(offsets), 1e-3)

    is_obstacle = np.array([rects[i].kind == OBSTACLE if i >= 0 else False for i in idx])
    surf_h = np.where(is_obstacle, camera.obstacle_height, camera.wall_height)
    base = np.where(is_obstacle, camera.obstacle_shade, camera.wall_shade)
    shade = haze(base, perp, camera) * np.where(face == 1, camera.side_face_factor, 1.0)

    f, cy = camera.focal, camera.height / 2
    bottom = cy + f * camera.cam_height / perp
    top = cy - f * (surf_h - camera.cam_height) / perp
    rows = np.arange(camera.height)[:, None] + 0.5
    img = np.where(rows < cy, camera.sky_shade, camera.floor_shade) * np.ones((1, camera.width))
    surface = (rows >= top[None, :]) & (rows < bottom[None, :])
    img = np.where(surface, shade[None, :], img)
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        img = img + rng.normal(0.0, noise_std, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)
