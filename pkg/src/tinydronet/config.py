"""Pipeline configuration: one flat key=value file, every field typed and round-trippable."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import AugmentConfig, GenConfig, NO_AUGMENT
from .model import ArchConfig, BlockKind
from .sim.control import ControlConfig
from .train import LossConfig, OptimConfig

ARTIFACT_ENV = "TINYDRONET_ARTIFACTS"


class ConfigFileError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    artifact_root: str = ""  # empty: $TINYDRONET_ARTIFACTS or ./artifacts
    # architecture
    block_kind: str = "DP"
    use_bypass: bool = False
    gamma: int = 8
    expansion: int = 6
    # data
    n_sequences: int = 120
    frames_per_run: int = 45
    split_train: float = 0.70
    split_val: float = 0.10
    split_test: float = 0.20
    zero_yaw_cap: float = 0.3
    balance_splits: str = "test"
    augment: bool = True
    # training
    epochs: int = 20
    beta_max: float = 1.0
    beta_start_epoch: int = 5
    hardmining_start: float = 1.0
    hardmining_end: float = 0.25
    lr: float = 1e-3
    batch_size: int = 16
    # quantization / deployment
    calib_samples: int = 512
    hw_config: str = "mp"
    # closed loop
    speeds: str = "0.5,1.0,1.5"
    episodes: int = 5
    alpha: float = 0.3
    brake_threshold: float = 0.7
    omega_max: float = 1.5707963267948966

    def validate(self) -> None:
        try:
            self.arch_config().validate()
            self.loss_config().validate()
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from exc
        if abs(self.split_train + self.split_val + self.split_test - 1.0) > 1e-9:
            raise ConfigFileError("split fractions must sum to 1")
        if self.n_sequences < 3 or self.frames_per_run < 1:
            raise ConfigFileError("need at least 3 sequences and 1 frame per run")
        if self.hw_config not in ("mp", "ee"):
            raise ConfigFileError(f"hw_config must be mp or ee, got {self.hw_config!r}")
        for s in self.balance_split_names:
            if s not in ("train", "val", "test"):
                raise ConfigFileError(f"unknown split {s!r} in balance_splits")
        if not self.speed_list or any(v <= 0 for v in self.speed_list):
            raise ConfigFileError("speeds must be a comma list of positive numbers")

    # --- derived configs ---
    def arch_config(self) -> ArchConfig:
        return ArchConfig(BlockKind(self.block_kind.upper()), self.use_bypass, self.gamma, self.expansion)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.beta_max, self.beta_start_epoch, self.epochs, self.hardmining_start,
                          self.hardmining_end)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(lr=self.lr, batch_size=self.batch_size)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig() if self.augment else NO_AUGMENT

    def gen_config(self) -> GenConfig:
        return GenConfig()

    def control_config(self, v_target: float, cnn_fps: float) -> ControlConfig:
        return ControlConfig(v_target, self.alpha, self.alpha, self.omega_max, self.brake_threshold, cnn_fps)

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.split_train, self.split_val, self.split_test)

    @property
    def speed_list(self) -> list[float]:
        return [float(v) for v in self.speeds.split(",") if v.strip()]

    @property
    def balance_split_names(self) -> list[str]:
        return [s.strip() for s in self.balance_splits.split(",") if s.strip()]

    def resolved_root(self) -> Path:
        return Path(self.artifact_root or os.environ.get(ARTIFACT_ENV) or "artifacts")

    def run_dir(self) -> Path:
        return self.resolved_root() / f"run-{self.arch_config().label}-seed{self.seed}"

    # --- file format ---
    def to_text(self) -> str:
        lines = ["# tinydronet pipeline config"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        updates = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigFileError(f"line {n}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigFileError(f"line {n}: unknown key {key!r}")
            updates[key] = _parse(val, types[key], key, n)
        cfg = replace(base, **updates)
        cfg.validate()
        return cfg

    def with_overrides(self, pairs: list[str]) -> "PipelineConfig":
        return PipelineConfig.from_text("\n".join(pairs), base=self)


def _parse(val: str, typ: type, key: str, line: int):
    try:
        if typ is bool:
            low = val.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        return typ(val)
    except ValueError as exc:
        raise ConfigFileError(f"line {line}: {key}={val!r} is not a valid {typ.__name__}") from exc


def load_config(path: str | Path) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigFileError(f"config file {p} not found")
    return PipelineConfig.from_text(p.read_text())


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_text())
