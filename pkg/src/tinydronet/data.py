"""Dataset format, synthetic generation with the oracle pilot, augmentation, balancing and splits.

On-disk layout::

    <root>/manifest.txt
    <root>/<sequence_id>/meta.txt        key=value sequence tags
    <root>/<sequence_id>/labels.csv      frame,timestamp,yaw_rate,collision
    <root>/<sequence_id>/frames/NNNNNN.pgm
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

from .sim.control import ControlConfig, DroneState, control_step
from .sim.pilot import PilotConfig, oracle_pilot_command
from .sim.render import DEFAULT_CAMERA, CameraConfig, render_camera
from .sim.world import World, build_upath_world, collision_label, disc_collides

IMAGE_SIZE = 200
YAW_ZERO_TOL = 1e-3
SPLITS = ("train", "val", "test")
LIGHT_GAIN = {"dark": 0.75, "normal": 1.0, "bright": 1.2}
MANIFEST_NAME = "manifest.txt"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FrameLabel:
    index: int
    timestamp: float
    yaw_rate: float
    collision: int


@dataclass
class Sample:
    image: np.ndarray  # (200, 200) uint8
    yaw_rate: float
    collision: int
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.image.dtype != np.uint8 or self.image.ndim != 2:
            raise DatasetError(f"image must be a 2-D uint8 array, got {self.image.dtype} {self.image.shape}")
        if not -1.0 <= self.yaw_rate <= 1.0:
            raise DatasetError(f"yaw_rate {self.yaw_rate} outside [-1, 1]")
        if self.collision not in (0, 1):
            raise DatasetError(f"collision label must be 0 or 1, got {self.collision}")


@dataclass(frozen=True)
class SequenceEntry:
    seq_id: str
    split: str  # "train" | "val" | "test" | "none"
    meta: dict
    frames: tuple[FrameLabel, ...]

    def frame_path(self, root: Path, index: int) -> Path:
        return root / self.seq_id / "frames" / f"{index:06d}.pgm"


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    sequences: tuple[SequenceEntry, ...]

    def __len__(self) -> int:
        return sum(len(s.frames) for s in self.sequences)

    def split(self, name: str) -> "DatasetManifest":
        return DatasetManifest(self.root, tuple(s for s in self.sequences if s.split == name))

    def labels(self) -> tuple[np.ndarray, np.ndarray]:
        yaw = np.array([f.yaw_rate for s in self.sequences for f in s.frames], dtype=np.float64)
        coll = np.array([f.collision for s in self.sequences for f in s.frames], dtype=np.int64)
        return yaw, coll

    def images(self) -> np.ndarray:
        """All frames as a ``(N, 1, 200, 200)`` uint8 array, in manifest order."""
        out = np.empty((len(self), 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
        i = 0
        for s in self.sequences:
            for f in s.frames:
                out[i, 0] = read_pgm(s.frame_path(self.root, f.index))
                i += 1
        return out

    def samples(self) -> Iterable[Sample]:
        for s in self.sequences:
            for f in s.frames:
                yield Sample(read_pgm(s.frame_path(self.root, f.index)), f.yaw_rate, f.collision,
                             {**s.meta, "sequence_id": s.seq_id, "timestamp": f.timestamp})


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    brightness_prob: float = 0.5
    brightness_delta: tuple[float, float] = (-30.0, 30.0)
    vignette_prob: float = 0.3
    vignette_strength: tuple[float, float] = (0.1, 0.5)
    blur_prob: float = 0.3
    blur_kernels: tuple[int, ...] = (3, 5)

    def validate(self) -> None:
        for p in (self.flip_prob, self.brightness_prob, self.vignette_prob, self.blur_prob):
            if not 0.0 <= p <= 1.0:
                raise DatasetError(f"probability {p} outside [0, 1]")
        if any(k < 1 or k % 2 == 0 for k in self.blur_kernels):
            raise DatasetError("blur kernels must be odd and positive")


NO_AUGMENT = AugmentConfig(0.0, 0.0, (0.0, 0.0), 0.0, (0.0, 0.0), 0.0, (1,))


@dataclass(frozen=True)
class GenConfig:
    capture_every: int = 5  # control ticks between stored frames (20 Hz at 100 Hz control)
    speeds: tuple[float, ...] = (0.5, 1.0)
    noise_fraction: float = 0.6  # share of runs flown with an injected yaw disturbance
    noise_sigma: float = 0.45  # stationary std of that disturbance
    noise_tau: float = 0.8  # correlation time [s]
    start_offset: float = 0.4  # max lateral offset of a run's start pose [m]
    start_heading: float = 0.4  # max heading error of a run's start pose [rad]
    pixel_noise: float = 3.0
    light_probs: tuple[float, float, float] = (0.2, 0.6, 0.2)  # dark, normal, bright


# --- image i/o -------------------------------------------------------------------

def write_pgm(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="L").save(path, format="PPM")


def read_pgm(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise DatasetError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


# --- manifest i/o -----------------------------------------------------------------

def _write_meta(path: Path, meta: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def _read_meta(path: Path) -> dict:
    meta = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def _write_labels(path: Path, frames: Sequence[FrameLabel]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "timestamp", "yaw_rate", "collision"])
        for f in frames:
            w.writerow([f.index, f"{f.timestamp:.2f}", repr(float(f.yaw_rate)), f.collision])


def _read_labels(path: Path) -> list[FrameLabel]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row_no, row in enumerate(reader, 2):
            try:
                f = FrameLabel(int(row["frame"]), float(row["timestamp"]), float(row["yaw_rate"]),
                               int(row["collision"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{row_no}: malformed label row ({exc})") from exc
            if not (math.isfinite(f.yaw_rate) and -1.0 <= f.yaw_rate <= 1.0):
                raise DatasetError(f"{path}:{row_no}: yaw_rate {f.yaw_rate} outside [-1, 1]")
            if f.collision not in (0, 1):
                raise DatasetError(f"{path}:{row_no}: collision {f.collision} is not 0/1")
            out.append(f)
    return out


def write_manifest(manifest: DatasetManifest, path: Optional[Path] = None) -> Path:
    """Manifest lines: ``<seq_id> <split> <frames>`` with ``frames`` = ``all`` or a comma list."""
    path = Path(path) if path else manifest.root / MANIFEST_NAME
    lines = ["# tinydronet-dataset v1"]
    for s in manifest.sequences:
        all_idx = [f.index for f in _read_labels(manifest.root / s.seq_id / "labels.csv")]
        idx = [f.index for f in s.frames]
        frames = "all" if idx == all_idx else (",".join(map(str, idx)) or "-")
        lines.append(f"{s.seq_id} {s.split} {frames}")
    path.write_text("\n".join(lines) + "\n")
    return path


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"manifest {path} not found")
    root = path.parent
    seqs = []
    seen = set()
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DatasetError(f"{path}:{n}: expected '<sequence> <split> <frames>'")
        seq_id, split, spec = parts
        if split not in (*SPLITS, "none"):
            raise DatasetError(f"{path}:{n}: unknown split {split!r}")
        if seq_id in seen:
            raise DatasetError(f"{path}:{n}: sequence {seq_id} listed twice")
        seen.add(seq_id)
        seq_dir = root / seq_id
        if not (seq_dir / "labels.csv").exists():
            raise DatasetError(f"{path}:{n}: {seq_dir}/labels.csv missing")
        labels = _read_labels(seq_dir / "labels.csv")
        if spec != "all":
            keep = set() if spec == "-" else {int(i) for i in spec.split(",")}
            unknown = keep - {f.index for f in labels}
            if unknown:
                raise DatasetError(f"{path}:{n}: unknown frames {sorted(unknown)[:5]}")
            labels = [f for f in labels if f.index in keep]
        meta = _read_meta(seq_dir / "meta.txt") if (seq_dir / "meta.txt").exists() else {}
        entry = SequenceEntry(seq_id, split, meta, tuple(labels))
        if check_files:
            for f in labels:
                if not entry.frame_path(root, f.index).exists():
                    raise DatasetError(f"{seq_id}: missing image for frame {f.index}")
        seqs.append(entry)
    return DatasetManifest(root, tuple(seqs))


# --- synthetic generation -----------------------------------------------------------

def _random_start(world: World, rng: np.random.Generator, cfg: GenConfig) -> DroneState:
    for _ in range(100):
        s = rng.uniform(0.0, 0.9 * world.total_length)
        x, y = world.point_at(s)
        x2, y2 = world.point_at(s + 0.05)
        heading = math.atan2(y2 - y, x2 - x)
        off = rng.uniform(-cfg.start_offset, cfg.start_offset)
        x, y = x - off * math.sin(heading), y + off * math.cos(heading)
        if world.inside(x, y) and not disc_collides(world, x, y, 0.2):
            return DroneState(x, y, heading + rng.uniform(-cfg.start_heading, cfg.start_heading))
    raise DatasetError("could not place a collision-free start pose")


def _fly_sequence(world: World, rng: np.random.Generator, n_frames: int, cfg: GenConfig,
                  gain: float, camera: CameraConfig):
    """Yield ``(image, yaw_label, collision, timestamp)`` while the oracle flies with injected noise.

    The executed yaw is the oracle command plus an Ornstein-Uhlenbeck disturbance so
    the data covers recovery states; the stored label is always the clean command.
    """
    dt = 0.01
    a = math.exp(-dt / cfg.noise_tau)
    b = cfg.noise_sigma * math.sqrt(1 - a * a)
    t = 0.0
    produced = 0
    while produced < n_frames:
        v = float(rng.choice(cfg.speeds))
        pilot = PilotConfig(v_target=v)
        ctrl = ControlConfig(v_target=v)
        state = _random_start(world, rng, cfg)
        noisy = rng.random() < cfg.noise_fraction
        noise = 0.0
        for k in range(100_000):
            pose = (state.x, state.y, state.theta)
            if not world.inside(state.x, state.y) or disc_collides(world, state.x, state.y, 0.05):
                break
            s, _ = world.project(state.x, state.y)
            if s >= world.s2_end and state.x <= 0.0:
                break
            yaw, v_cmd = oracle_pilot_command(world, pose, pilot)
            if k % cfg.capture_every == 0:
                img = render_camera(world, pose, camera)
                img = img.astype(np.float64) * gain + rng.normal(0.0, cfg.pixel_noise, img.shape)
                yield (np.clip(np.rint(img), 0, 255).astype(np.uint8), yaw,
                       collision_label(world, *pose), round(t, 2))
                produced += 1
                if produced >= n_frames:
                    return
            if noisy:
                noise = a * noise + b * rng.standard_normal()
            state = control_step(state, float(np.clip(yaw + noise, -1, 1)), 1.0 - v_cmd / v, ctrl)
            t += dt
        t += 1.0  # visible gap between runs in the timestamps


def generate_synthetic_dataset(world_seeds: Sequence[int], frames_per_run: int, out_dir: str | Path,
                               cfg: GenConfig = GenConfig(), camera: CameraConfig = DEFAULT_CAMERA,
                               ) -> DatasetManifest:
    """One sequence per world seed, each holding exactly ``frames_per_run`` frames."""
    if frames_per_run < 1:
        raise DatasetError("frames_per_run must be >= 1")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DatasetError(f"output directory {root} is not writable: {exc}") from exc

    seqs = []
    for seed in world_seeds:
        rng = np.random.default_rng([int(seed), 0x5EED])
        world = build_upath_world(seed=int(seed))
        light = str(rng.choice(list(LIGHT_GAIN), p=list(cfg.light_probs)))
        seq_id = f"seq{int(seed):05d}"
        seq_dir = root / seq_id
        (seq_dir / "frames").mkdir(parents=True, exist_ok=True)
        frames = []
        for i, (img, yaw, coll, ts) in enumerate(
                _fly_sequence(world, rng, frames_per_run, cfg, LIGHT_GAIN[light], camera)):
            write_pgm(seq_dir / "frames" / f"{i:06d}.pgm", img)
            frames.append(FrameLabel(i, ts, float(yaw), int(coll)))
        meta = {
            "sequence_id": seq_id, "scenario": "indoor", "path_type": "u-path",
            "obstacle_types": "box", "height_m": 0.5, "light": light, "world_seed": int(seed),
            "corridor_length_m": world.geometry.length, "n_obstacles": len(world.obstacles()),
            "n_frames": len(frames),
        }
        _write_meta(seq_dir / "meta.txt", meta)
        _write_labels(seq_dir / "labels.csv", frames)
        seqs.append(SequenceEntry(seq_id, "none", {k: str(v) for k, v in meta.items()}, tuple(frames)))
    manifest = DatasetManifest(root, tuple(seqs))
    write_manifest(manifest)
    return manifest


# --- splitting, balancing, augmentation ----------------------------------------------

def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` sequences (ties go to the earlier split)."""
    exact = [n * f for f in fractions]
    counts = [int(math.floor(e + 1e-9)) for e in exact]
    order = sorted(range(len(fractions)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(manifest: DatasetManifest, fractions: Sequence[float] = (0.70, 0.10, 0.20),
                  seed: int = 0) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Sequence-granular train/val/test split, deterministic under ``seed``."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(manifest.sequences)
    needed = sum(f > 0 for f in fractions)
    if n < needed:
        raise DatasetError(f"{n} sequences cannot fill {needed} non-empty splits")
    counts = split_counts(n, fractions)
    # every split with a positive fraction gets at least one sequence
    for i, f in enumerate(fractions):
        if f > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    out = []
    start = 0
    for name, c in zip(SPLITS, counts):
        chosen = sorted(perm[start:start + c])
        out.append(DatasetManifest(manifest.root, tuple(
            replace(manifest.sequences[i], split=name) for i in chosen)))
        start += c
    return tuple(out)


def merge_manifests(*parts: DatasetManifest) -> DatasetManifest:
    roots = {p.root for p in parts}
    if len(roots) != 1:
        raise DatasetError("cannot merge manifests with different roots")
    seqs = sorted((s for p in parts for s in p.sequences), key=lambda s: s.seq_id)
    return DatasetManifest(roots.pop(), tuple(seqs))


def zeros_to_drop(n_total: int, n_zero: int, cap: float) -> int:
    """Smallest ``d`` with ``(n_zero - d) / (n_total - d) <= cap``."""
    if cap >= 1.0 or n_total == 0 or n_zero <= cap * n_total:
        return 0
    d = max(0, int(math.ceil((n_zero - cap * n_total) / (1.0 - cap))) - 1)
    while d < n_zero and (n_zero - d) > cap * (n_total - d):
        d += 1
    return d


def balance_split(manifest: DatasetManifest, zero_yaw_cap: float = 0.3, tol: float = YAW_ZERO_TOL,
                  seed: int = 0) -> DatasetManifest:
    """Randomly drop zero-yaw frames until their share is at most ``zero_yaw_cap``."""
    if not 0.0 < zero_yaw_cap <= 1.0:
        raise DatasetError(f"zero_yaw_cap must be in (0, 1], got {zero_yaw_cap}")
    flat = [(si, fi) for si, s in enumerate(manifest.sequences) for fi, f in enumerate(s.frames)
            if abs(f.yaw_rate) <= tol]
    d = zeros_to_drop(len(manifest), len(flat), zero_yaw_cap)
    if d == 0:
        return manifest
    rng = np.random.default_rng(seed)
    drop = {flat[i] for i in rng.choice(len(flat), size=d, replace=False)}
    seqs = tuple(replace(s, frames=tuple(f for fi, f in enumerate(s.frames) if (si, fi) not in drop))
                 for si, s in enumerate(manifest.sequences))
    return DatasetManifest(manifest.root, seqs)


def zero_yaw_fraction(manifest: DatasetManifest, tol: float = YAW_ZERO_TOL) -> float:
    yaw, _ = manifest.labels()
    return float(np.mean(np.abs(yaw) <= tol)) if len(yaw) else 0.0


def flip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def brightness(image: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(np.rint(image.astype(np.float64) + delta), 0, 255).astype(np.uint8)


def vignette(image: np.ndarray, strength: float) -> np.ndarray:
    """Multiply by ``1 - strength * r^2`` with ``r`` the normalized distance to the centre."""
    h, w = image.shape[-2:]
    yy, xx = np.mgrid[0:h, 0:w]
    r2 = ((yy - (h - 1) / 2) / (h / 2)) ** 2 + ((xx - (w - 1) / 2) / (w / 2)) ** 2
    falloff = 1.0 - strength * np.clip(r2 / 2.0, 0.0, 1.0)
    return np.clip(np.rint(image * falloff), 0, 255).astype(np.uint8)


def box_blur(image: np.ndarray, k: int) -> np.ndarray:
    if k <= 1:
        return image.copy()
    out = uniform_filter(image.astype(np.float64), size=k, mode="nearest")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment_image(image: np.ndarray, yaw: float, cfg: AugmentConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Random flip (negating yaw), brightness shift, vignette and box blur on one uint8 image."""
    img = image
    if rng.random() < cfg.flip_prob:
        img, yaw = flip(img), -yaw
    if rng.random() < cfg.brightness_prob:
        img = brightness(img, rng.uniform(*cfg.brightness_delta))
    if rng.random() < cfg.vignette_prob:
        img = vignette(img, rng.uniform(*cfg.vignette_strength))
    if rng.random() < cfg.blur_prob:
        img = box_blur(img, int(rng.choice(cfg.blur_kernels)))
    return img, yaw


def augment_sample(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    img, yaw = augment_image(s.image, s.yaw_rate, cfg, rng)
    return Sample(img, yaw, s.collision, dict(s.meta))


def yaw_histogram(manifest: DatasetManifest, bins: int = 21) -> tuple[np.ndarray, np.ndarray]:
    yaw, _ = manifest.labels()
    return np.histogram(yaw, bins=bins, range=(-1.0, 1.0))


def write_histogram(manifest: DatasetManifest, path: str | Path, bins: int = 21) -> None:
    counts, edges = yaw_histogram(manifest, bins)
    yaw, coll = manifest.labels()
    lines = ["bin_lo,bin_hi,count"]
    lines += [f"{lo:.3f},{hi:.3f},{c}" for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    lines.append(f"# frames={len(yaw)} zero_yaw={zero_yaw_fraction(manifest):.4f} "
                 f"collision_rate={float(np.mean(coll)) if len(coll) else 0.0:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")
