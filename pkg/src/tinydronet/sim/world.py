"""Planar corridor worlds: the U-shaped test path and randomized training variants.

Frame convention: ``x`` runs along the first corridor, ``y`` points to the
drone's right when it flies along +x, and heading ``theta`` grows clockwise
(toward +y). A positive yaw command therefore turns the drone right.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

WALL = "wall"
OBSTACLE = "obstacle"


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float
    kind: str = WALL

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass(frozen=True)
class ObstacleSpec:
    segment: int  # 1 or 3
    station: float  # distance from the segment start along the travel direction [m]
    side: str  # "left" or "right" relative to the travel direction


@dataclass(frozen=True)
class DynamicObstacle:
    """Appears in the lane center once the drone crosses ``trigger_x``."""
    trigger_x: float
    clearance: float = 1.5
    width: float = 1.0
    depth: float = 0.3
    lifetime: float = 5.0


@dataclass(frozen=True)
class UPathGeometry:
    length: float = 6.0
    width: float = 2.0
    divider: float = 0.2
    wall: float = 0.1
    start_margin: float = 1.0
    obstacle_width: float = 1.0
    obstacle_depth: float = 0.3
    obstacles: tuple[ObstacleSpec, ...] = (
        ObstacleSpec(1, 2.0, "right"),
        ObstacleSpec(1, 4.0, "left"),
        ObstacleSpec(3, 2.0, "right"),
        ObstacleSpec(3, 4.0, "left"),
    )
    dynamic: bool = False

    def validate(self) -> None:
        if min(self.length, self.width, self.divider, self.wall) <= 0:
            raise GeometryError("dimensions must be positive")
        if self.obstacle_width >= self.width:
            raise GeometryError(
                f"obstacle width {self.obstacle_width} m leaves no gap in a {self.width} m corridor")
        for ob in self.obstacles:
            if ob.segment not in (1, 3) or ob.side not in ("left", "right"):
                raise GeometryError(f"bad obstacle {ob}")
            if not 0 <= ob.station <= self.length - self.obstacle_depth:
                raise GeometryError(f"obstacle station {ob.station} outside the segment")


@dataclass(frozen=True)
class World:
    geometry: UPathGeometry
    rects: tuple[Rect, ...]
    centerline: np.ndarray = field(repr=False, compare=False)
    arclength: np.ndarray = field(repr=False, compare=False)
    s1_end: float
    s2_end: float
    dynamic: Optional[DynamicObstacle] = None
    start: tuple[float, float, float] = (0.0, 1.0, 0.0)

    @property
    def total_length(self) -> float:
        return float(self.arclength[-1])

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        xs = [r.x0 for r in self.rects] + [r.x1 for r in self.rects]
        ys = [r.y0 for r in self.rects] + [r.y1 for r in self.rects]
        return min(xs), min(ys), max(xs), max(ys)

    def obstacles(self) -> list[Rect]:
        return [r for r in self.rects if r.kind == OBSTACLE]

    def inside(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 < x < x1 and y0 < y < y1

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Arc-length of the nearest centerline point and the distance to it."""
        d2 = (self.centerline[:, 0] - x) ** 2 + (self.centerline[:, 1] - y) ** 2
        i = int(np.argmin(d2))
        return float(self.arclength[i]), float(math.sqrt(d2[i]))

    def point_at(self, s: float) -> tuple[float, float]:
        s = min(max(s, 0.0), self.total_length)
        return (float(np.interp(s, self.arclength, self.centerline[:, 0])),
                float(np.interp(s, self.arclength, self.centerline[:, 1])))

    def segment_of(self, s: float) -> int:
        if s < self.s1_end:
            return 1
        if s < self.s2_end:
            return 2
        return 3

    def with_rects(self, extra: Sequence[Rect]) -> "World":
        if not extra:
            return self
        return World(self.geometry, self.rects + tuple(extra), self.centerline, self.arclength,
                     self.s1_end, self.s2_end, self.dynamic, self.start)


def _obstacle_rect(g: UPathGeometry, ob: ObstacleSpec) -> Rect:
    W, L, d = g.width, g.length, g.divider
    if ob.segment == 1:
        xa = ob.station
        lo = W - g.obstacle_width if ob.side == "right" else 0.0
        return Rect(xa, lo, xa + g.obstacle_depth, lo + g.obstacle_width, OBSTACLE)
    xa = L - ob.station - g.obstacle_depth
    # travelling -x, the drone's right is -y (the divider side)
    lo = W + d if ob.side == "right" else 2 * W + d - g.obstacle_width
    return Rect(xa, lo, xa + g.obstacle_depth, lo + g.obstacle_width, OBSTACLE)


def _lateral_profile(g: UPathGeometry, segment: int) -> list[tuple[float, float]]:
    """(station, lateral offset from the drone-left wall) waypoints through the gaps."""
    center = g.width / 2
    gap_half = (g.width - g.obstacle_width) / 2
    obs = sorted((o for o in g.obstacles if o.segment == segment), key=lambda o: o.station)
    pts = [(0.0, center)]
    for ob in obs:
        lat = gap_half if ob.side == "right" else g.width - gap_half
        pts.append((max(ob.station - 0.5, 0.0), lat))
        pts.append((min(ob.station + g.obstacle_depth + 0.2, g.length), lat))
    if obs:
        pts.append((min(obs[-1].station + g.obstacle_depth + 1.0, g.length), center))
    pts.append((g.length, center))
    cleaned: list[tuple[float, float]] = []
    for s, lat in pts:
        if cleaned and s <= cleaned[-1][0]:
            cleaned[-1] = (cleaned[-1][0], lat)
        else:
            cleaned.append((s, lat))
    return cleaned


def _densify(points: np.ndarray, step: float = 0.02) -> np.ndarray:
    out = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
        for k in range(1, n + 1):
            out.append(a + (b - a) * k / n)
    return np.asarray(out)


def _centerline(g: UPathGeometry) -> tuple[np.ndarray, float, float]:
    W, L, d = g.width, g.length, g.divider
    s3 = _lateral_profile(g, 3)
    pts = list(_lateral_profile(g, 1))
    cx, cy, radius = L, W + d / 2, W / 2 + d / 2
    arc = [(cx + radius * math.cos(a), cy + radius * math.sin(a))
           for a in np.linspace(-math.pi / 2, math.pi / 2, 33)[1:-1]]
    pts += arc
    pts += [(L - s, 2 * W + d - lat) for s, lat in s3]
    dense = _densify(np.asarray(pts, dtype=float))
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    arclen = np.concatenate([[0.0], np.cumsum(seg)])
    # segment ends at the first dense points at the bend entry/exit
    i1 = int(np.argmin(np.hypot(dense[:, 0] - L, dense[:, 1] - W / 2)))
    i2 = int(np.argmin(np.hypot(dense[:, 0] - L, dense[:, 1] - (1.5 * W + d))))
    return dense, float(arclen[i1]), float(arclen[i2])


def build_upath_world(geometry: Optional[UPathGeometry] = None, seed: Optional[int] = None) -> World:
    """U-shaped path: two parallel corridors joined by a 180 degree right-hand bend.

    With ``seed`` given a randomized variant is drawn instead (corridor length,
    obstacle count/stations/sides); the same seed always yields the same world.
    """
    g = geometry or UPathGeometry()
    if seed is not None:
        g = random_geometry(np.random.default_rng(seed), g)
    g.validate()
    W, L, d, t, m = g.width, g.length, g.divider, g.wall, g.start_margin
    far = L + W
    top = 2 * W + d
    rects = [
        Rect(-m - t, -t, far + t, 0.0),        # drone-left wall of S1
        Rect(far, -t, far + t, top + t),        # far wall of the bend
        Rect(-m - t, top, far + t, top + t),    # outer wall of S3
        Rect(-m, W, L, W + d),                  # divider
        Rect(-m - t, -t, -m, top + t),          # back wall
    ]
    rects += [_obstacle_rect(g, ob) for ob in g.obstacles]
    line, s1_end, s2_end = _centerline(g)
    arclen = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(line, axis=0), axis=1))])
    dynamic = None
    if g.dynamic:
        first = min((o for o in g.obstacles if o.segment == 1), key=lambda o: o.station, default=None)
        trigger = (first.station + g.obstacle_depth) if first else 1.0
        dynamic = DynamicObstacle(trigger_x=trigger, width=g.obstacle_width, depth=g.obstacle_depth)
    return World(g, tuple(rects), line, arclen, s1_end, s2_end, dynamic, (0.0, W / 2, 0.0))


def dynamic_rect(world: World, drone_x: float) -> Rect:
    """Lane-centered obstacle leaving ``clearance`` metres of braking space ahead of the drone."""
    dyn = world.dynamic
    W = world.geometry.width
    x0 = drone_x + dyn.clearance
    y0 = (W - dyn.width) / 2
    return Rect(x0, y0, x0 + dyn.depth, y0 + dyn.width, OBSTACLE)


def random_geometry(rng: np.random.Generator, base: UPathGeometry = UPathGeometry()) -> UPathGeometry:
    length = float(rng.uniform(5.0, 8.0))
    depth = base.obstacle_depth
    obstacles = []
    for segment in (1, 3):
        n = int(rng.integers(0, 4))
        stations: list[float] = []
        s = float(rng.uniform(1.2, 2.2))
        for _ in range(n):
            if s > length - depth - 0.8:
                break
            stations.append(s)
            s += float(rng.uniform(1.6, 2.6))
        side = "right" if rng.random() < 0.5 else "left"
        for st in stations:
            obstacles.append(ObstacleSpec(segment, round(st, 3), side))
            side = "left" if side == "right" else "right"
    return UPathGeometry(
        length=round(length, 3), width=base.width, divider=base.divider, wall=base.wall,
        start_margin=base.start_margin, obstacle_width=base.obstacle_width,
        obstacle_depth=depth, obstacles=tuple(obstacles),
    )


# --- geometry queries ------------------------------------------------------------

def disc_hits_rect(x: float, y: float, r: float, rect: Rect) -> bool:
    """Exact disc/axis-aligned-rectangle intersection via the closest point."""
    cx = min(max(x, rect.x0), rect.x1)
    cy = min(max(y, rect.y0), rect.y1)
    return (x - cx) ** 2 + (y - cy) ** 2 <= r * r


def disc_collides(world: World, x: float, y: float, r: float, extra: Sequence[Rect] = ()) -> bool:
    return any(disc_hits_rect(x, y, r, rect) for rect in (*world.rects, *extra))


def raycast(rects: Sequence[Rect], ox: float, oy: float, angles: np.ndarray, max_range: float = np.inf):
    """Distance along each ray to the first rectangle, plus hit index and face.

    Returns ``(dist, idx, face)`` where ``face`` is 0 for an x-facing (vertical
    in plan view) face and 1 for a y-facing one; ``idx`` is -1 for misses.
    """
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    r = np.array([[q.x0, q.y0, q.x1, q.y1] for q in rects], dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_x = np.where(dx != 0, 1.0 / dx, np.inf)
        inv_y = np.where(dy != 0, 1.0 / dy, np.inf)
        tx1, tx2 = (r[None, :, 0] - ox) * inv_x, (r[None, :, 2] - ox) * inv_x
        ty1, ty2 = (r[None, :, 1] - oy) * inv_y, (r[None, :, 3] - oy) * inv_y
    txn, txf = np.minimum(tx1, tx2), np.maximum(tx1, tx2)
    tyn, tyf = np.minimum(ty1, ty2), np.maximum(ty1, ty2)
    # rays parallel to a slab: inside -> unbounded, outside -> empty interval (miss)
    in_x = (r[None, :, 0] <= ox) & (ox <= r[None, :, 2])
    in_y = (r[None, :, 1] <= oy) & (oy <= r[None, :, 3])
    par_x, par_y = np.broadcast_to(dx == 0, txn.shape), np.broadcast_to(dy == 0, tyn.shape)
    txn = np.where(par_x, np.where(in_x, -np.inf, np.inf), txn)
    txf = np.where(par_x, np.where(in_x, np.inf, -np.inf), txf)
    tyn = np.where(par_y, np.where(in_y, -np.inf, np.inf), tyn)
    tyf = np.where(par_y, np.where(in_y, np.inf, -np.inf), tyf)
    t_near = np.maximum(txn, tyn)
    t_far = np.minimum(txf, tyf)
    hit = (t_near <= t_far) & (t_far >= 0)
    t = np.where(hit, np.maximum(t_near, 0.0), np.inf)
    idx = np.argmin(t, axis=1)
    rows = np.arange(len(angles))
    dist = t[rows, idx]
    face = np.where(txn[rows, idx] >= tyn[rows, idx], 0, 1)
    idx = np.where(np.isfinite(dist), idx, -1)
    dist = np.minimum(dist, max_range)
    return dist, idx, face


def forward_range(world: World, x: float, y: float, theta: float, extra: Sequence[Rect] = (),
                  max_range: float = 4.0) -> float:
    """Single-beam line-of-sight range, capped like the 0-4 m ToF sensor."""
    dist, _, _ = raycast((*world.rects, *extra), x, y, np.array([theta]), max_range)
    return float(dist[0])


def collision_label(world: World, x: float, y: float, theta: float, extra: Sequence[Rect] = (),
                    threshold: float = 2.0) -> int:
    return int(forward_range(world, x, y, theta, extra) < threshold)
