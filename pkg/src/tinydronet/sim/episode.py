"""Closed-loop episode runner, scorer, and trace serialization."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np

from .control import DT, ControlConfig, DroneState, control_step
from .pilot import PilotConfig, oracle_pilot_command
from .render import DEFAULT_CAMERA, CameraConfig, render_camera
from .world import Rect, World, disc_collides, dynamic_rect

DRONE_RADIUS = 0.05
NOT_ATTEMPTED = "---"


class PolicyError(RuntimeError):
    pass


class Policy(Protocol):
    needs_image: bool

    def __call__(self, image: Optional[np.ndarray], world: World, pose: tuple) -> tuple[float, float]:
        ...


@dataclass
class OraclePolicy:
    """Privileged pilot; brakes through ``p_coll = 1 - v_cmd / v_target``."""
    pilot: PilotConfig = PilotConfig()
    needs_image: bool = False

    def __call__(self, image, world, pose):
        yaw, v_cmd = oracle_pilot_command(world, pose, self.pilot)
        return yaw, 1.0 - v_cmd / self.pilot.v_target


@dataclass
class ConstantPolicy:
    yaw: float = 0.0
    p_coll: float = 0.0
    needs_image: bool = False

    def __call__(self, image, world, pose):
        return self.yaw, self.p_coll


@dataclass
class ImagePolicy:
    """Wraps ``predict(batch_uint8) -> (yaw, p_coll)`` arrays, e.g. a float or int8 CNN."""
    predict: Callable
    needs_image: bool = True

    def __call__(self, image, world, pose):
        yaw, p = self.predict(image[None, None])
        return float(np.asarray(yaw).reshape(-1)[0]), float(np.asarray(p).reshape(-1)[0])


@dataclass
class EpisodeLog:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    yaw_pred: np.ndarray
    p_coll: np.ndarray
    outcome: str  # "success" | "crash" | "stall"
    end_time: float
    n_queries: int
    n_evaluated: int
    v_target: float
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def distance(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(np.sum(np.hypot(np.diff(self.x), np.diff(self.y))))

    def to_jsonl(self, path: str | Path, summary: Optional[dict] = None) -> None:
        with open(path, "w") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "t": round(float(self.t[i]), 4), "x": float(self.x[i]), "y": float(self.y[i]),
                    "theta": float(self.theta[i]), "v": float(self.v[i]), "omega": float(self.omega[i]),
                    "yaw_pred": float(self.yaw_pred[i]), "p_coll": float(self.p_coll[i]),
                }) + "\n")
            rec = {"summary": True, "outcome": self.outcome, "end_time": self.end_time,
                   "n_queries": self.n_queries, "n_evaluated": self.n_evaluated,
                   "v_target": self.v_target, "seed": self.seed, "meta": self.meta}
            if summary:
                rec.update(summary)
            fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "EpisodeLog":
        rows, summary = [], None
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            if rec.get("summary"):
                summary = rec
            else:
                rows.append(rec)
        if summary is None:
            raise ValueError(f"{path}: missing summary record")
        cols = {k: np.array([r[k] for r in rows], dtype=float)
                for k in ("t", "x", "y", "theta", "v", "omega", "yaw_pred", "p_coll")}
        return cls(**cols, outcome=summary["outcome"], end_time=summary["end_time"],
                   n_queries=summary["n_queries"], n_evaluated=summary["n_evaluated"],
                   v_target=summary["v_target"], seed=summary["seed"], meta=summary.get("meta", {}))


def _track_progress(world: World, xs, ys, max_step: float = 0.3) -> np.ndarray:
    """Monotone arc-length progress; rejects projection jumps across the divider."""
    prog = np.zeros(len(xs))
    best = 0.0
    for i, (x, y) in enumerate(zip(xs, ys)):
        s, _ = world.project(x, y)
        if best < s <= best + max_step:
            best = s
        prog[i] = best
    return prog


def run_episode(world: World, policy: Policy, cfg: ControlConfig = ControlConfig(), seed: int = 0,
                camera: CameraConfig = DEFAULT_CAMERA, noise_std: float = 3.0,
                start_jitter: tuple[float, float] = (0.1, math.radians(5.0)),
                max_time: Optional[float] = None, stall_time: float = 8.0,
                finish_x: float = 0.0) -> EpisodeLog:
    """Fly one episode at 100 Hz, querying ``policy`` at ``cfg.cnn_fps``.

    Query ``j`` is issued at ``j / fps`` on the image of that instant and its
    result becomes available one inference period later; between results the
    controller holds the latest prediction. Results that are superseded before
    any control tick reads them are counted but not computed.
    """
    rng = np.random.default_rng(seed)
    x0, y0, th0 = world.start
    jl, ja = start_jitter
    state = DroneState(x0 + rng.uniform(-jl, jl), y0 + rng.uniform(-jl, jl), th0 + rng.uniform(-ja, ja))
    noise_rng = np.random.default_rng(rng.integers(2**32))
    if max_time is None:
        max_time = 4.0 * world.total_length / max(cfg.v_target, 0.1) + 20.0

    fps = cfg.cnn_fps
    pred = (0.0, 1.0)  # hold position until the first inference lands
    last_j = -1
    n_evaluated = 0
    hist: list[DroneState] = [state]
    rec = {k: [] for k in ("t", "x", "y", "theta", "v", "omega", "yaw_pred", "p_coll")}
    dyn_rect: Optional[Rect] = None
    dyn_t0 = 0.0
    dyn_fired = False
    progress, anchor, last_gain_t = 0.0, 0.0, 0.0
    outcome = "stall"

    def active_extra(t: float) -> tuple[Rect, ...]:
        if dyn_rect is not None and dyn_t0 <= t < dyn_t0 + world.dynamic.lifetime:
            return (dyn_rect,)
        return ()

    def log(s: DroneState):
        for k, v in (("t", s.t), ("x", s.x), ("y", s.y), ("theta", s.theta), ("v", s.v),
                     ("omega", s.omega), ("yaw_pred", pred[0]), ("p_coll", pred[1])):
            rec[k].append(v)

    log(state)
    k = 0
    while True:
        t = k * DT
        j = int(math.floor(t * fps + 1e-9)) - 1
        if j >= 0 and j != last_j:
            t_issue = j / fps
            src = hist[min(int(math.floor(t_issue / DT + 1e-9)), len(hist) - 1)]
            pose = (src.x, src.y, src.theta)
            image = None
            if policy.needs_image:
                image = render_camera(world, pose, camera, active_extra(t_issue), noise_std, noise_rng)
            try:
                yaw, p = policy(image, world, pose)
            except Exception as exc:  # noqa: BLE001
                raise PolicyError(f"policy failed at t={t:.2f}s: {exc}") from exc
            if not (math.isfinite(yaw) and math.isfinite(p)):
                raise PolicyError(f"policy returned non-finite output at t={t:.2f}s")
            pred = (float(np.clip(yaw, -1, 1)), float(np.clip(p, 0, 1)))
            last_j = j
            n_evaluated += 1
        state = control_step(state, pred[0], pred[1], cfg)
        k += 1
        hist.append(state)
        log(state)

        if (world.dynamic is not None and not dyn_fired and progress < world.s1_end
                and state.x >= world.dynamic.trigger_x):
            dyn_fired = True
            dyn_rect = dynamic_rect(world, state.x)
            dyn_t0 = state.t

        if not world.inside(state.x, state.y) or disc_collides(
                world, state.x, state.y, DRONE_RADIUS, active_extra(state.t)):
            outcome = "crash"
            break
        s, _ = world.project(state.x, state.y)
        if progress < s <= progress + 0.3:
            progress = s
            if progress >= anchor + 0.05:
                anchor, last_gain_t = progress, state.t
        if progress >= world.s2_end and state.x <= finish_x:
            outcome = "success"
            break
        if state.t - last_gain_t > stall_time or state.t >= max_time:
            outcome = "stall"
            break

    arrays = {k: np.asarray(v, dtype=float) for k, v in rec.items()}
    return EpisodeLog(**arrays, outcome=outcome, end_time=float(state.t),
                      n_queries=int(math.ceil(state.t * fps - 1e-9)), n_evaluated=n_evaluated,
                      v_target=cfg.v_target, seed=seed)


@dataclass
class EpisodeResult:
    segments: tuple[str, str, str]  # each "success" | "crash" | "stall" | "---"
    v_avg: Optional[float]

    @property
    def full_success(self) -> bool:
        return all(s == "success" for s in self.segments)


def evaluate_episode(log: EpisodeLog, world: World, finish_x: float = 0.0) -> EpisodeResult:
    """Per-segment outcomes: segments after the failing one are not attempted."""
    if len(log) == 0:
        return EpisodeResult((NOT_ATTEMPTED,) * 3, None)
    prog = _track_progress(world, log.x, log.y)
    reached = float(prog[-1])
    finished = reached >= world.s2_end and log.x[-1] <= finish_x and log.outcome == "success"
    if finished:
        return EpisodeResult(("success",) * 3, log.distance / log.end_time if log.end_time > 0 else None)
    failed_in = world.segment_of(reached)
    failure = log.outcome if log.outcome in ("crash", "stall") else "stall"
    segs = []
    for seg in (1, 2, 3):
        if seg < failed_in:
            segs.append("success")
        elif seg == failed_in:
            segs.append(failure)
        else:
            segs.append(NOT_ATTEMPTED)
    return EpisodeResult(tuple(segs), None)


def success_table(results: list[EpisodeResult]) -> dict:
    """Aggregate like the in-field tables: "k/n" per segment and mean v_avg."""
    n = len(results)
    out = {}
    for i, name in enumerate(("S1", "S2", "S3")):
        attempted = [r for r in results if r.segments[i] != NOT_ATTEMPTED]
        out[name] = f"{sum(r.segments[i] == 'success' for r in attempted)}/{n}" if attempted else NOT_ATTEMPTED
    full = [r.v_avg for r in results if r.full_success and r.v_avg is not None]
    out["v_avg"] = round(float(np.mean(full)), 3) if len(full) == n and n else "N/A"
    out["full_success"] = sum(r.full_success for r in results)
    out["episodes"] = n
    return out


def plot_episodes(world: World, logs: list[EpisodeLog], path: str | Path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    fig, ax = plt.subplots(figsize=(8, 6))
    for r in world.rects:
        ax.add_patch(Rectangle((r.x0, r.y0), r.x1 - r.x0, r.y1 - r.y0,
                               color="black" if r.kind == "obstacle" else "0.6"))
    ax.plot(world.centerline[:, 0], world.centerline[:, 1], ":", color="0.5", lw=0.8)
    for log in logs:
        ax.plot(log.x, log.y, lw=1.2, label=f"seed {log.seed}: {log.outcome}")
    ax.set_aspect("equal")
    ax.invert_yaxis()
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
