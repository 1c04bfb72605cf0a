"""Two-level-memory hardware model, L1 tiling planner, and cycle/throughput/energy estimators."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ArchConfig, BlockKind, LayerKind, ModelGraph, build_model

CYCLE_MODEL_PATH = Path(__file__).with_name("cycle_model.json")
CONV_META_BYTES_PER_CH = 12  # int32 multiplier, shift, bias
FC_META_BYTES = 4


class DeployError(RuntimeError):
    pass


class TilingError(DeployError):
    pass


# --- hardware -------------------------------------------------------------------------------

@dataclass(frozen=True)
class OperatingPoint:
    name: str
    fc_mhz: float
    cluster_mhz: float
    vdd: float

    @property
    def cluster_hz(self) -> float:
        return self.cluster_mhz * 1e6


@dataclass(frozen=True)
class HardwareModel:
    l1_bytes: int = 65536
    l2_bytes: int = 524288
    cores: int = 8
    buffering: int = 2
    configs: tuple[OperatingPoint, ...] = (
        OperatingPoint("mp", 250.0, 175.0, 1.2),
        OperatingPoint("ee", 50.0, 100.0, 1.0),
    )
    mp_power_mw: float = 100.0
    ee_power_mw_wide: float = 38.0  # gamma in {1, 2}
    ee_power_mw_narrow: float = 34.0  # gamma in {4, 8}

    def validate(self) -> None:
        if not 0 < self.l1_bytes < self.l2_bytes:
            raise DeployError("need 0 < l1_bytes < l2_bytes")
        if self.buffering < 1 or self.cores < 1:
            raise DeployError("buffering and cores must be >= 1")
        for op in self.configs:
            if not (1 <= op.fc_mhz <= 250 and 1 <= op.cluster_mhz <= 175):
                raise DeployError(f"{op.name}: frequencies outside the supported envelope")

    def config(self, name: str) -> OperatingPoint:
        for op in self.configs:
            if op.name == name:
                return op
        raise DeployError(f"unknown operating point {name!r}")

    def power_mw(self, config: str, gamma: int = 8) -> float:
        if config == "mp":
            return self.mp_power_mw
        if config == "ee":
            return self.ee_power_mw_wide if gamma <= 2 else self.ee_power_mw_narrow
        raise DeployError(f"no power figure for operating point {config!r}")


GAP8 = HardwareModel()


# --- deployable layers ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DeployLayer:
    """One fused kernel as executed on the target: Conv-BN-ReLU6, pool, residual add, or FC head."""
    name: str
    kind: str  # conv2d | depthwise | pointwise | maxpool | add | fully_connected
    in_ch: int
    in_h: int
    in_w: int
    out_ch: int
    out_h: int
    out_w: int
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    n_inputs: int = 1  # 2 for a residual add

    @property
    def in_bytes(self) -> int:
        return self.n_inputs * self.in_ch * self.in_h * self.in_w

    @property
    def out_bytes(self) -> int:
        return self.out_ch * self.out_h * self.out_w

    def weight_bytes(self, c0: int = 0, c1: Optional[int] = None) -> int:
        c1 = self.out_ch if c1 is None else c1
        n = c1 - c0
        if self.kind in ("conv2d", "pointwise"):
            return n * self.in_ch * self.kernel ** 2 + CONV_META_BYTES_PER_CH * n
        if self.kind == "depthwise":
            return n * self.kernel ** 2 + CONV_META_BYTES_PER_CH * n
        if self.kind == "fully_connected":
            return n * self.in_ch * self.in_h * self.in_w + FC_META_BYTES * n
        return 0

    def macs(self, r0: int = 0, r1: Optional[int] = None, c0: int = 0, c1: Optional[int] = None) -> int:
        r1 = self.out_h if r1 is None else r1
        c1 = self.out_ch if c1 is None else c1
        pix = (r1 - r0) * self.out_w * (c1 - c0)
        if self.kind in ("conv2d", "pointwise"):
            return pix * self.in_ch * self.kernel ** 2
        if self.kind == "depthwise":
            return pix * self.kernel ** 2
        if self.kind == "fully_connected":
            return (c1 - c0) * self.in_ch * self.in_h * self.in_w
        return 0

    def elementwise_ops(self, r0: int = 0, r1: Optional[int] = None, c0: int = 0, c1: Optional[int] = None) -> int:
        r1 = self.out_h if r1 is None else r1
        c1 = self.out_ch if c1 is None else c1
        pix = (r1 - r0) * self.out_w * (c1 - c0)
        if self.kind == "maxpool":
            return pix * self.kernel ** 2
        if self.kind == "add":
            return pix * 2
        return 0

    def input_rows(self, r0: int, r1: int) -> tuple[int, int]:
        """Input row span ``[a, b)`` needed for output rows ``[r0, r1)``."""
        if self.kind == "fully_connected":
            return 0, self.in_h
        a = r0 * self.stride - self.pad
        b = (r1 - 1) * self.stride - self.pad + self.kernel
        return max(a, 0), min(b, self.in_h)

    def input_row_count(self, r0: int, r1: int) -> int:
        """Distinct input rows read; fewer than the span when the stride skips rows (k < s)."""
        a, b = self.input_rows(r0, r1)
        if self.kind == "fully_connected" or self.kernel >= self.stride:
            return b - a
        starts = np.arange(r0, r1) * self.stride - self.pad
        lo = np.clip(starts, 0, self.in_h)
        hi = np.clip(starts + self.kernel, 0, self.in_h)
        return int(np.sum(hi - lo))

    def input_channels(self, c0: int, c1: int) -> int:
        return (c1 - c0) if self.kind in ("depthwise", "maxpool", "add") else self.in_ch

    def tile_bytes(self, r0: int, r1: int, c0: int, c1: int) -> tuple[int, int, int]:
        """``(input, output, weight)`` bytes of one tile."""
        in_b = self.n_inputs * self.input_channels(c0, c1) * self.input_row_count(r0, r1) * self.in_w
        out_b = (c1 - c0) * (r1 - r0) * self.out_w
        return in_b, out_b, self.weight_bytes(c0, c1)


_KIND = {LayerKind.CONV2D: "conv2d", LayerKind.DEPTHWISE: "depthwise", LayerKind.POINTWISE: "pointwise",
         LayerKind.MAXPOOL: "maxpool", LayerKind.FULLY_CONNECTED: "fully_connected"}


def deploy_layers(graph: ModelGraph) -> list[DeployLayer]:
    """Fused execution order: stem, each block's main then bypass branch and add, then the heads."""
    out = []

    def seq(layers):
        for s in layers:
            if s.kind in _KIND and s.kind != LayerKind.FULLY_CONNECTED:
                out.append(DeployLayer(s.name, _KIND[s.kind], s.in_ch, s.in_h, s.in_w, s.out_ch,
                                       s.out_h, s.out_w, s.kernel, s.stride, s.pad))

    seq(graph.stem)
    for b in graph.blocks:
        seq(b.main)
        if b.bypass:
            seq(b.bypass)
            last = b.main[-1]
            out.append(DeployLayer(f"{b.name}.add", "add", last.out_ch, last.out_h, last.out_w, last.out_ch,
                                   last.out_h, last.out_w, n_inputs=2))
    for s in graph.heads:
        c, h, w = graph.feature_shape
        out.append(DeployLayer(s.name, "fully_connected", c, h, w, s.out_ch, 1, 1))
    return out


def _graph_of(model) -> ModelGraph:
    return model.graph if hasattr(model, "graph") else model


# --- tiling -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class Tile:
    r0: int
    r1: int
    c0: int
    c1: int
    in_bytes: int
    out_bytes: int
    weight_bytes: int


@dataclass
class LayerTiling:
    layer: DeployLayer
    tile_rows: int
    tile_ch: int
    tiles: list

    @property
    def untiled(self) -> bool:
        return len(self.tiles) == 1

    def l1_usage(self, buffering: int) -> int:
        return max(buffering * (t.in_bytes + t.out_bytes) + t.weight_bytes for t in self.tiles)


@dataclass
class TilingPlan:
    layers: list
    buffering: int
    l1_bytes: int
    l2_bytes: int
    l2_weights: int
    l2_activations: int

    @property
    def peak_l1(self) -> int:
        return max(lt.l1_usage(self.buffering) for lt in self.layers)

    @property
    def peak_l2(self) -> int:
        return self.l2_weights + self.l2_activations

    def layer(self, name: str) -> LayerTiling:
        for lt in self.layers:
            if lt.layer.name == name:
                return lt
        raise KeyError(name)

    def to_records(self) -> list[dict]:
        recs = []
        for lt in self.layers:
            recs.append({"layer": lt.layer.name, "kind": lt.layer.kind, "tile_rows": lt.tile_rows,
                         "tile_ch": lt.tile_ch, "n_tiles": len(lt.tiles),
                         "l1_bytes": lt.l1_usage(self.buffering),
                         "tiles": [[t.r0, t.r1, t.c0, t.c1] for t in lt.tiles]})
        return recs


def _fits(layer: DeployLayer, rows: int, ch: int, budget: int, buffering: int) -> bool:
    """Worst-case tile of ``rows`` x ``ch`` (an interior tile reads the most input rows)."""
    for r0 in {0, max(0, (layer.out_h - rows) // 2), max(0, layer.out_h - rows)}:
        i, o, w = layer.tile_bytes(r0, min(r0 + rows, layer.out_h), 0, ch)
        if buffering * (i + o) + w > budget:
            return False
    return True


def _make_tiles(layer: DeployLayer, rows: int, ch: int) -> list[Tile]:
    tiles = []
    for c0 in range(0, layer.out_ch, ch):
        c1 = min(c0 + ch, layer.out_ch)
        for r0 in range(0, layer.out_h, rows):
            r1 = min(r0 + rows, layer.out_h)
            tiles.append(Tile(r0, r1, c0, c1, *layer.tile_bytes(r0, r1, c0, c1)))
    return tiles


def tile_layer(layer: DeployLayer, hw: HardwareModel = GAP8) -> LayerTiling:
    """Largest feasible tile: full output channels (weights L1-resident) with the most rows,
    otherwise the most channels that admit at least one row."""
    for ch in range(layer.out_ch, 0, -1):
        if not _fits(layer, 1, ch, hw.l1_bytes, hw.buffering):
            continue
        lo, hi = 1, layer.out_h  # binary search on rows; feasibility is monotone in rows
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if _fits(layer, mid, ch, hw.l1_bytes, hw.buffering):
                lo = mid
            else:
                hi = mid - 1
        tiles = _make_tiles(layer, lo, ch)
        return LayerTiling(layer, lo, ch, tiles)
    raise TilingError(f"{layer.name}: even a 1-row, 1-channel tile exceeds L1 ({hw.l1_bytes} B)")


def plan_tiling(model, hw: HardwareModel = GAP8) -> TilingPlan:
    hw.validate()
    layers = deploy_layers(_graph_of(model))
    tilings = [tile_layer(layer, hw) for layer in layers]
    weights = sum(layer.weight_bytes() for layer in layers)
    acts = max(layer.in_bytes + layer.out_bytes for layer in layers)
    if weights + acts > hw.l2_bytes:
        raise TilingError(f"model needs {weights + acts} B of L2, only {hw.l2_bytes} B available")
    return TilingPlan(tilings, hw.buffering, hw.l1_bytes, hw.l2_bytes, weights, acts)


def check_plan(plan: TilingPlan, hw: HardwareModel = GAP8) -> list[str]:
    """Independent re-derivation of every tile's footprint plus an exact coverage check."""
    problems = []
    for lt in plan.layers:
        L = lt.layer
        covered = np.zeros((L.out_ch, L.out_h), dtype=np.int64)
        for t in lt.tiles:
            if not (0 <= t.r0 < t.r1 <= L.out_h and 0 <= t.c0 < t.c1 <= L.out_ch):
                problems.append(f"{L.name}: tile {t} out of bounds")
                continue
            covered[t.c0:t.c1, t.r0:t.r1] += 1
            if L.kind == "fully_connected":
                in_b = L.in_ch * L.in_h * L.in_w
                w_b = (t.c1 - t.c0) * (in_b + FC_META_BYTES)
            else:
                rows = set()
                for r in range(t.r0, t.r1):
                    top = r * L.stride - L.pad
                    rows.update(range(max(top, 0), min(top + L.kernel, L.in_h)))
                cin = (t.c1 - t.c0) if L.kind in ("depthwise", "maxpool", "add") else L.in_ch
                in_b = L.n_inputs * cin * len(rows) * L.in_w
                k2 = L.kernel * L.kernel
                per_ch = {"conv2d": L.in_ch * k2, "pointwise": L.in_ch * k2, "depthwise": k2}.get(L.kind)
                w_b = 0 if per_ch is None else (t.c1 - t.c0) * (per_ch + CONV_META_BYTES_PER_CH)
            out_b = (t.c1 - t.c0) * (t.r1 - t.r0) * L.out_w
            if (in_b, out_b, w_b) != (t.in_bytes, t.out_bytes, t.weight_bytes):
                problems.append(f"{L.name}: tile {t} footprint mismatch ({in_b}, {out_b}, {w_b})")
            lhs = hw.buffering * (in_b + out_b) + w_b
            if lhs > hw.l1_bytes:
                problems.append(f"{L.name}: tile {t} needs {lhs} B > L1 {hw.l1_bytes} B")
        if not np.all(covered == 1):
            problems.append(f"{L.name}: tiles do not cover the output exactly once")
    return problems


# --- cycle model ---------------------------------------------------------------------------------

CYCLE_KINDS = ("conv2d", "depthwise", "pointwise", "fully_connected")
PRIOR = {
    "conv2d": (3.0, 4.0), "depthwise": (1.0, 4.0), "pointwise": (4.0, 8.0), "fully_connected": (0.5, 0.0),
    "elementwise": (2.0, 0.0),
}
# Totals of the four width variants of the depthwise-separable, no-bypass network.
CALIBRATION_TARGETS = {1: 5.1e6, 2: 2.9e6, 4: 1.7e6, 8: 1.3e6}


@dataclass(frozen=True)
class CycleModel:
    """``cycles = work / eta`` with ``eta = eta_peak * out_ch / (out_ch + c0)`` per kernel kind."""
    eta_peak: dict
    c0: dict
    version: int = 1
    note: str = ""

    def eta(self, kind: str, out_ch: int) -> float:
        key = kind if kind in CYCLE_KINDS else "elementwise"
        c0 = self.c0[key]
        return self.eta_peak[key] * out_ch / (out_ch + c0)

    def layer_cycles(self, tiling: LayerTiling) -> float:
        L = tiling.layer
        total = 0.0
        for t in tiling.tiles:
            ch = t.c1 - t.c0
            work = L.macs(t.r0, t.r1, t.c0, t.c1) if L.kind in CYCLE_KINDS else L.elementwise_ops(t.r0, t.r1, t.c0, t.c1)
            total += work / self.eta(L.kind, ch)
        return total

    def to_json(self) -> str:
        return json.dumps({"version": self.version, "eta_peak": self.eta_peak, "c0": self.c0,
                           "note": self.note}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CycleModel":
        d = json.loads(text)
        if d.get("version") != 1:
            raise DeployError(f"unsupported cycle model version {d.get('version')}")
        return cls({k: float(v) for k, v in d["eta_peak"].items()}, {k: float(v) for k, v in d["c0"].items()},
                   1, d.get("note", ""))


def load_cycle_model(path: str | Path = CYCLE_MODEL_PATH) -> CycleModel:
    return CycleModel.from_json(Path(path).read_text())


def tiny_graph(gamma: int) -> ModelGraph:
    return build_model(ArchConfig(BlockKind.DP, use_bypass=False, gamma=gamma))


def fit_cycle_model(targets: Optional[dict] = None, hw: HardwareModel = GAP8,
                    prior_weight: float = 0.05) -> CycleModel:
    """Least-squares fit of log totals to ``targets`` (gamma -> cycles) with a weak log-prior."""
    from scipy.optimize import least_squares

    targets = targets or CALIBRATION_TARGETS
    kinds = list(PRIOR)
    plans = {g: plan_tiling(tiny_graph(g), hw) for g in targets}
    x0 = np.log([v for k in kinds for v in (PRIOR[k][0], PRIOR[k][1] + 1.0)])

    def unpack(x):
        vals = np.exp(x)
        peak = {k: float(vals[2 * i]) for i, k in enumerate(kinds)}
        c0 = {k: float(vals[2 * i + 1] - 1.0) for i, k in enumerate(kinds)}
        return CycleModel(peak, c0)

    def resid(x):
        m = unpack(x)
        r = [math.log(sum(m.layer_cycles(lt) for lt in plans[g].layers) / t) for g, t in targets.items()]
        return np.concatenate([r, prior_weight * (x - x0)])

    sol = least_squares(resid, x0, method="trf", xtol=1e-12, ftol=1e-12, gtol=1e-12)
    m = unpack(sol.x)
    if not m.eta_peak["depthwise"] < m.eta_peak["pointwise"]:
        raise DeployError("fitted depthwise peak efficiency is not below pointwise")
    peak = {k: round(v, 6) for k, v in m.eta_peak.items()}
    c0 = {k: round(max(v, 0.0), 6) for k, v in m.c0.items()}
    note = "fitted to totals " + ", ".join(f"gamma={g}: {t:.3g}" for g, t in targets.items())
    return CycleModel(peak, c0, 1, note)


@dataclass
class CycleEstimate:
    per_layer: dict
    total: float

    @property
    def total_cycles(self) -> int:
        return int(round(self.total))


def estimate_cycles(model, plan: Optional[TilingPlan] = None, hw: HardwareModel = GAP8,
                    cycle_model: Optional[CycleModel] = None) -> CycleEstimate:
    plan = plan or plan_tiling(model, hw)
    cm = cycle_model or load_cycle_model()
    per = {lt.layer.name: cm.layer_cycles(lt) for lt in plan.layers}
    return CycleEstimate(per, float(sum(per.values())))


def estimate_throughput(total_cycles: float, hw: HardwareModel = GAP8, config: str = "mp") -> float:
    if total_cycles <= 0:
        raise DeployError("cycles must be positive")
    return hw.config(config).cluster_hz / total_cycles


def estimate_energy(total_cycles: float, hw: HardwareModel = GAP8, config: str = "mp", gamma: int = 8,
                    power_mw: Optional[float] = None) -> float:
    """Energy per inference in mJ: ``P [mW] * cycles / f_cluster [Hz]``."""
    if total_cycles <= 0:
        raise DeployError("cycles must be positive")
    p = hw.power_mw(config, gamma) if power_mw is None else power_mw
    return p * total_cycles / hw.config(config).cluster_hz


# --- report ----------------------------------------------------------------------------------

@dataclass
class DeployReport:
    arch: str
    gamma: int
    rows: list  # per-layer dicts
    total_cycles: float
    total_macs: int
    mac_per_cycle: float
    fps: dict  # config -> frames/s
    energy_mj: dict  # config -> mJ per frame
    peak_l1: int
    peak_l2: int
    dma_bytes: int

    @property
    def fps_mp(self) -> float:
        return self.fps["mp"]

    def to_records(self) -> list[dict]:
        summary = {k: v for k, v in asdict(self).items() if k != "rows"}
        summary["record"] = "total"
        return [{"record": "layer", **r} for r in self.rows] + [summary]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def table(self) -> str:
        lines = [f"{'layer':<24}{'kind':<16}{'tiles':>6}{'MACs':>11}{'cycles':>11}{'MAC/cyc':>9}{'L1 [B]':>8}"]
        for r in self.rows:
            lines.append(f"{r['layer']:<24}{r['kind']:<16}{r['tiles']:>6}{r['macs']:>11}"
                         f"{r['cycles']:>11.0f}{r['mac_per_cycle']:>9.2f}{r['l1_bytes']:>8}")
        lines.append(f"{'TOTAL':<24}{'':<16}{'':>6}{self.total_macs:>11}{self.total_cycles:>11.0f}"
                     f"{self.mac_per_cycle:>9.2f}{self.peak_l1:>8}")
        lines.append(f"fps mp {self.fps['mp']:.1f}  ee {self.fps['ee']:.1f}  |  "
                     f"E_mp {self.energy_mj['mp']:.2f} mJ  E_ee {self.energy_mj['ee']:.2f} mJ  |  "
                     f"peak L2 {self.peak_l2} B  DMA {self.dma_bytes} B/frame")
        return "\n".join(lines)


def generate_report(model, hw: HardwareModel = GAP8, cycle_model: Optional[CycleModel] = None) -> DeployReport:
    graph = _graph_of(model)
    plan = plan_tiling(graph, hw)
    est = estimate_cycles(graph, plan, hw, cycle_model)
    rows = []
    dma = 0
    for lt in plan.layers:
        macs = lt.layer.macs()
        cyc = est.per_layer[lt.layer.name]
        rows.append({"layer": lt.layer.name, "kind": lt.layer.kind, "tiles": len(lt.tiles), "macs": macs,
                     "cycles": cyc, "mac_per_cycle": macs / cyc if cyc else 0.0,
                     "l1_bytes": lt.l1_usage(plan.buffering)})
        dma += sum(t.in_bytes + t.out_bytes + t.weight_bytes for t in lt.tiles)
    total_macs = sum(r["macs"] for r in rows)
    gamma = graph.config.gamma
    fps = {op.name: estimate_throughput(est.total, hw, op.name) for op in hw.configs}
    energy = {op.name: estimate_energy(est.total, hw, op.name, gamma) for op in hw.configs}
    return DeployReport(graph.config.label, gamma, rows, est.total, total_macs, total_macs / est.total,
                        fps, energy, plan.peak_l1, plan.peak_l2, dma)
