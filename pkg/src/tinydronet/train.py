"""Training loop: MSE + beta*BCE loss, beta warm-up schedule, hard negative mining, Adam, metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .data import AugmentConfig, DatasetManifest, augment_image
from .model import ModelGraph
from .nn import checkpoint
from .nn.network import Params, copy_params, init_params, model_backward, model_forward, trainable_keys

P_CLAMP = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    beta_max: float = 1.0
    beta_start_epoch: int = 5
    total_epochs: int = 20
    hardmining_start_fraction: float = 1.0
    hardmining_end_fraction: float = 0.25

    def validate(self) -> None:
        for f in (self.hardmining_start_fraction, self.hardmining_end_fraction):
            if not 0.0 < f <= 1.0:
                raise ValueError(f"hard-mining fraction must be in (0, 1], got {f}")
        if not 0 <= self.beta_start_epoch < self.total_epochs:
            raise ValueError("beta_start_epoch must lie in [0, total_epochs)")
        if self.beta_max < 0:
            raise ValueError("beta_max must be non-negative")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class Metrics:
    rmse: float
    accuracy: float
    n: int = 0


def beta_schedule(epoch: int, cfg: LossConfig) -> float:
    """Zero during warm-up, then a logarithmic ramp reaching ``beta_max`` at the last epoch."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    s = cfg.beta_start_epoch
    if epoch < s:
        return 0.0
    return cfg.beta_max * math.log(1 + epoch - s + 1) / math.log(1 + cfg.total_epochs - s)


def hardmining_fraction(epoch: int, cfg: LossConfig) -> float:
    if cfg.total_epochs <= 1:
        return cfg.hardmining_start_fraction
    t = min(max(epoch, 0), cfg.total_epochs - 1) / (cfg.total_epochs - 1)
    return cfg.hardmining_start_fraction + t * (cfg.hardmining_end_fraction - cfg.hardmining_start_fraction)


def compute_loss(yaw_pred, yaw_true, p_pred, coll_true, beta: float) -> tuple[float, np.ndarray]:
    """Mean of ``(yaw_pred - yaw_true)^2 + beta * BCE(p_pred, coll_true)`` and the per-sample terms."""
    yaw_pred, yaw_true = np.asarray(yaw_pred, np.float64), np.asarray(yaw_true, np.float64)
    p, c = np.clip(np.asarray(p_pred, np.float64), P_CLAMP, 1 - P_CLAMP), np.asarray(coll_true, np.float64)
    if not (yaw_pred.shape == yaw_true.shape == p.shape == c.shape):
        raise ValueError(f"batch shape mismatch: {yaw_pred.shape}, {yaw_true.shape}, {p.shape}, {c.shape}")
    per = (yaw_pred - yaw_true) ** 2
    if beta != 0.0:
        per = per + beta * -(c * np.log(p) + (1 - c) * np.log1p(-p))
    return float(per.mean()), per


def loss_grads(yaw_pred, yaw_true, p_pred, coll_true, beta: float, selected: np.ndarray):
    """Derivatives of the mean loss over ``selected`` w.r.t. yaw and the collision logit."""
    n = len(yaw_pred)
    d_yaw = np.zeros(n)
    d_logit = np.zeros(n)
    k = len(selected)
    d_yaw[selected] = 2.0 * (yaw_pred[selected] - yaw_true[selected]) / k
    if beta != 0.0:
        d_logit[selected] = beta * (p_pred[selected] - coll_true[selected]) / k
    return d_yaw, d_logit


def hard_mining_select(per_sample_losses, epoch: int, cfg: LossConfig) -> np.ndarray:
    """Indices of the ``k`` highest losses (ascending index order); ties prefer the lower index."""
    losses = np.asarray(per_sample_losses)
    if losses.size == 0:
        raise ValueError("empty batch")
    k = max(1, int(math.floor(losses.size * hardmining_fraction(epoch, cfg) + 0.5)))
    order = np.lexsort((np.arange(losses.size), -losses))
    return np.sort(order[:k])


class Adam:
    def __init__(self, params: Params, cfg: OptimConfig = OptimConfig()):
        self.cfg = cfg
        self.keys = trainable_keys(params)
        self.m = {k: np.zeros_like(params[k]) for k in self.keys}
        self.v = {k: np.zeros_like(params[k]) for k in self.keys}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for k in self.keys:
            g = grads[k].astype(params[k].dtype, copy=False)
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params[k] -= (c.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)).astype(params[k].dtype)


def to_input(images_u8: np.ndarray, dtype=np.float32) -> np.ndarray:
    return images_u8.astype(dtype) / dtype(255.0)


def predict(graph: ModelGraph, params: Params, images_u8: np.ndarray,
            batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    yaws, ps = [], []
    for i in range(0, len(images_u8), batch_size):
        y, p = model_forward(graph, params, to_input(images_u8[i:i + batch_size]))
        yaws.append(y)
        ps.append(p)
    if not yaws:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(yaws).astype(np.float64), np.concatenate(ps).astype(np.float64)


def float_predictor(graph: ModelGraph, params: Params) -> Callable:
    return lambda images_u8: predict(graph, params, images_u8)


def metrics_from_predictions(yaw_pred, yaw_true, p_pred, coll_true, threshold: float = 0.5) -> Metrics:
    yaw_pred, yaw_true = np.asarray(yaw_pred, float), np.asarray(yaw_true, float)
    if yaw_true.size == 0:
        raise ValueError("no samples to evaluate")
    rmse = float(np.sqrt(np.mean((yaw_pred - yaw_true) ** 2)))
    acc = float(np.mean((np.asarray(p_pred) >= threshold).astype(int) == np.asarray(coll_true)))
    return Metrics(rmse, acc, int(yaw_true.size))


def evaluate_metrics(graph: ModelGraph, params: Params, manifest: DatasetManifest,
                     threshold: float = 0.5, images: Optional[np.ndarray] = None) -> Metrics:
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    yaw_true, coll = manifest.labels()
    imgs = manifest.images() if images is None else images
    yaw, p = predict(graph, params, imgs)
    return metrics_from_predictions(yaw, yaw_true, p, coll, threshold)


def trivial_baselines(manifest: DatasetManifest) -> dict:
    yaw, coll = manifest.labels()
    if yaw.size == 0:
        raise ValueError("empty manifest")
    return {
        "rmse_always_zero_yaw": float(np.sqrt(np.mean(yaw ** 2))),
        "acc_always_collision": float(np.mean(coll == 1)),
        "acc_never_collision": float(np.mean(coll == 0)),
    }


@dataclass
class TrainResult:
    params: Params  # best-validation parameters
    history: list = field(default_factory=list)
    best_epoch: int = -1
    final_params: Optional[Params] = None


def _score(m: Metrics) -> float:
    """Lower is better: yaw RMSE plus collision error rate."""
    return m.rmse + (1.0 - m.accuracy)


def train(graph: ModelGraph, train_set: DatasetManifest, val_set: DatasetManifest,
          loss_cfg: LossConfig = LossConfig(), optim: OptimConfig = OptimConfig(),
          augment: AugmentConfig = AugmentConfig(), seed: int = 0, params: Optional[Params] = None,
          out_dir: Optional[str | Path] = None, log: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Deterministic mini-batch training; keeps the best-validation parameters.

    Writes ``metrics.jsonl`` (one record per epoch) and ``best.ckpt`` to ``out_dir``
    when given.
    """
    loss_cfg.validate()
    augment.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise TrainingError("train and validation sets must be non-empty")
    rng = np.random.default_rng(seed)
    params = init_params(graph, seed) if params is None else copy_params(params)
    opt = Adam(params, optim)
    x_all = train_set.images()
    yaw_all, coll_all = train_set.labels()
    x_val = val_set.images()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")

    result = TrainResult(params=copy_params(params))
    best = math.inf
    n = len(x_all)
    bs = optim.batch_size
    for epoch in range(loss_cfg.total_epochs):
        beta = beta_schedule(epoch, loss_cfg)
        frac = hardmining_fraction(epoch, loss_cfg)
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            imgs = np.empty((len(idx), 1, *x_all.shape[2:]), dtype=np.uint8)
            yaw_t = yaw_all[idx].copy()
            for j, i in enumerate(idx):
                imgs[j, 0], yaw_t[j] = augment_image(x_all[i, 0], yaw_t[j], augment, rng)
            coll_t = coll_all[idx].astype(np.float64)
            yaw_p, p_p, trace = model_forward(graph, params, to_input(imgs), trace=True, mode="train")
            yaw_p, p_p = yaw_p.astype(np.float64), p_p.astype(np.float64)
            batch_loss, per = compute_loss(yaw_p, yaw_t, p_p, coll_t, beta)
            if not math.isfinite(batch_loss):
                raise TrainingError(f"loss diverged (non-finite) at epoch {epoch}, batch starting {start}")
            sel = hard_mining_select(per, epoch, loss_cfg)
            grads = model_backward(graph, params, trace, loss_grads(yaw_p, yaw_t, p_p, coll_t, beta, sel))
            opt.step(params, grads)
            total += batch_loss * len(idx)
            count += len(idx)
        val = evaluate_metrics(graph, params, val_set, images=x_val)
        rec = {"epoch": epoch, "loss": total / count, "val_rmse": val.rmse, "val_acc": val.accuracy,
               "beta": beta, "k_fraction": frac}
        result.history.append(rec)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if log is not None:
            log(json.dumps(rec))
        # the collision head is untrained before beta > 0, so only then can it win on accuracy
        score = _score(val) if beta > 0 or loss_cfg.beta_max == 0 else math.inf
        if score < best or result.best_epoch < 0:
            best = score if math.isfinite(score) else best
            result.best_epoch = epoch
            result.params = copy_params(params)
            if out is not None:
                checkpoint.save_checkpoint(result.params, out / "best.ckpt")
    result.final_params = params
    return result


def read_metrics_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def loss_config_dict(cfg: LossConfig) -> dict:
    return asdict(cfg)
