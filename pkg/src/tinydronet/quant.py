"""Post-training uint8 quantization and integer-domain inference.

Every weighted convolution in the network is a Conv-BN-ReLU6 triplet. Its
integer form is

    acc  = sum (q_x - z_x) * (q_w - z_w)                  (32-bit accumulator)
    q_y  = clamp(z_y + rhafz(m_c * (acc + B_c) / 2**s_c), q(0), q(6))

with the batch-norm scale folded into the per-channel fixed-point multiplier
``m_c / 2**s_c`` and its shift folded into the int32 bias ``B_c``. Max pooling
runs directly on uint8 codes, residual adds requantize both branches onto a
shared shift, and the two fully connected heads are dequantized at the end.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ArchConfig, BlockKind, LayerKind, ModelGraph, build_model, count_params, count_weights
from .nn import kernels as K
from .nn.network import Params, apply_layer

MIN_SPAN = 1e-3
QMIN, QMAX = 0, 255
INPUT = "input"
MAGIC = b"TDQM"
FORMAT_VERSION = 1
INT32_MAX = 2**31 - 1


class QuantError(ValueError):
    pass


# --- scalar affine quantization ---------------------------------------------------

@dataclass(frozen=True)
class QParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantError(f"scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise QuantError(f"zero point {self.zero_point} outside [0, 255]")


def widen_range(lo: float, hi: float, min_span: float = MIN_SPAN) -> tuple[float, float]:
    """Include zero and enforce a minimum span so the scale never collapses."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi - lo < min_span:
        if lo == 0.0:
            hi = lo + min_span
        elif hi == 0.0:
            lo = hi - min_span
        else:
            mid = (lo + hi) / 2
            lo, hi = min(mid - min_span / 2, 0.0), max(mid + min_span / 2, 0.0)
    return lo, hi


def choose_qparams(lo: float, hi: float) -> QParams:
    lo, hi = widen_range(lo, hi)
    scale = (hi - lo) / (QMAX - QMIN)
    zp = int(np.clip(round_half_away(-lo / scale), QMIN, QMAX))
    return QParams(scale, zp)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return out if out.ndim else float(out)


def quantize(x, qp: QParams) -> np.ndarray:
    q = round_half_away(np.asarray(x, np.float64) / qp.scale) + qp.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.uint8)


def dequantize(q, qp: QParams) -> np.ndarray:
    return (np.asarray(q, np.float64) - qp.zero_point) * qp.scale


# --- fixed-point multipliers -----------------------------------------------------------

def quantize_multiplier(M: float) -> tuple[int, int]:
    """``M ~= m / 2**s`` with ``2**30 <= |m| < 2**31`` (``m = 0`` for ``M = 0``)."""
    if M == 0.0 or not math.isfinite(M):
        return 0, 31
    mant, exp = math.frexp(abs(M))  # |M| = mant * 2**exp, mant in [0.5, 1)
    m = int(round_half_away(mant * 2**31))
    s = 31 - exp
    if m == 2**31:
        m //= 2
        s -= 1
    if s > 62:  # below 2**-32: contributes nothing to an 8-bit code
        return 0, 31
    if s < 1:
        raise QuantError(f"requantization multiplier {M} is too large")
    return int(math.copysign(m, M)), s


def rshift_round(v: np.ndarray, s) -> np.ndarray:
    """``rhafz(v / 2**s)`` for int64 ``v`` and shifts ``s >= 1``."""
    v = np.asarray(v, np.int64)
    s = np.asarray(s, np.int64)
    half = np.left_shift(np.int64(1), s - 1)
    mag = np.right_shift(np.abs(v) + half, s)
    return np.where(v < 0, -mag, mag)


def requantize(acc: np.ndarray, m, s, bias=0) -> np.ndarray:
    """``rhafz(m * (acc + bias) / 2**s)`` in int64; ``m``, ``s``, ``bias`` broadcast per channel."""
    v = (np.asarray(acc, np.int64) + np.asarray(bias, np.int64)) * np.asarray(m, np.int64)
    return rshift_round(v, s)


# --- quantized graph ----------------------------------------------------------------

@dataclass
class QConv:
    name: str  # the convolution layer name; the triplet output is "<name>_relu"
    weight: np.ndarray  # uint8, the float weight's shape
    w_q: QParams
    in_q: QParams
    out_q: QParams
    multiplier: np.ndarray  # int32 per output channel
    shift: np.ndarray  # int32 per output channel
    bias: np.ndarray  # int32 per output channel, accumulator domain
    float_scale: np.ndarray = field(repr=False, default=None)  # exact per-channel M (for error budgets)
    float_bias: np.ndarray = field(repr=False, default=None)  # exact folded BN shift in output units

    @property
    def clamp(self) -> tuple[int, int]:
        lo = int(np.clip(self.out_q.zero_point, QMIN, QMAX))
        hi = int(np.clip(self.out_q.zero_point + round_half_away(6.0 / self.out_q.scale), QMIN, QMAX))
        return lo, hi


@dataclass
class QAdd:
    name: str  # "blockN.add"
    main_q: QParams
    bypass_q: QParams
    out_q: QParams
    m_main: int
    m_bypass: int
    shift: int


@dataclass
class QHead:
    name: str
    weight: np.ndarray  # uint8 (1, features)
    w_q: QParams
    in_q: QParams
    bias: np.ndarray  # int32 (1,)


@dataclass
class QuantizedGraph:
    graph: ModelGraph
    input_q: QParams
    convs: dict  # conv layer name -> QConv
    adds: dict  # block name -> QAdd
    heads: tuple  # (QHead yaw, QHead coll)

    def weight_bytes(self) -> int:
        """Bytes of the uint8 weight payload (conv and FC weights)."""
        return sum(c.weight.size for c in self.convs.values()) + sum(h.weight.size for h in self.heads)

    def metadata_bytes(self) -> int:
        """Int32 multipliers/shifts/biases plus per-tensor scale (f32) and zero point (u8) records."""
        ints = sum(3 * c.multiplier.size for c in self.convs.values()) + sum(h.bias.size for h in self.heads)
        ints += 3 * len(self.adds)
        tensors = 1 + 2 * len(self.convs) + 2 * len(self.heads) + len(self.adds)
        return 4 * ints + 5 * tensors

    def size_report(self) -> dict:
        return {
            "weight_bytes": self.weight_bytes(),
            "metadata_bytes": self.metadata_bytes(),
            "int8_equivalent_bytes": count_params(self.graph),
            "fp32_bytes": 4 * count_params(self.graph),
            "n_weights": count_weights(self.graph),
        }


# --- calibration -----------------------------------------------------------------------

def _act_points(graph: ModelGraph) -> list[str]:
    pts = [INPUT]
    for spec in graph.layers():
        if spec.kind == LayerKind.RELU6:
            pts.append(spec.name)
    pts += [f"{b.name}.add" for b in graph.blocks if b.bypass]
    return pts


def calibrate_activations(graph: ModelGraph, params: Params, images_u8: np.ndarray, n: int = 512,
                          batch_size: int = 64) -> dict:
    """Per-tensor ``(min, max)`` over the first ``n`` calibration images.

    Keys are ReLU6 layer names, ``"input"`` and ``"blockN.add"`` for residual sums.
    ReLU6 outputs are clamped to ``[0, 6]``; degenerate ranges are widened.
    """
    imgs = np.asarray(images_u8)
    if imgs.ndim == 2:
        imgs = imgs[None, None]
    imgs = imgs[:n]
    if len(imgs) == 0:
        raise QuantError("calibration needs at least one sample")
    lo = {k: math.inf for k in _act_points(graph)}
    hi = {k: -math.inf for k in lo}

    def see(key, arr):
        lo[key] = min(lo[key], float(arr.min()))
        hi[key] = max(hi[key], float(arr.max()))

    for i in range(0, len(imgs), batch_size):
        x = imgs[i:i + batch_size].astype(np.float32) / np.float32(255.0)
        see(INPUT, x)
        for spec in graph.stem:
            x = apply_layer(spec, x, params)
            if spec.kind == LayerKind.RELU6:
                see(spec.name, x)
        for block in graph.blocks:
            def run(seq, h):
                for spec in seq:
                    h = apply_layer(spec, h, params)
                    if spec.kind == LayerKind.RELU6:
                        see(spec.name, h)
                return h
            main = run(block.main, x)
            if block.bypass:
                main = main + run(block.bypass, x)
                see(f"{block.name}.add", main)
            x = main
    out = {}
    for k in lo:
        a, b = lo[k], hi[k]
        if k != INPUT and not k.endswith(".add"):
            a, b = max(a, 0.0), min(b, 6.0)
        out[k] = widen_range(a, b)
    return out


# --- quantization --------------------------------------------------------------------------

def _weight_qparams(w: np.ndarray) -> QParams:
    return choose_qparams(float(w.min()), float(w.max()))


def quantize_model(graph: ModelGraph, params: Params, ranges: dict) -> QuantizedGraph:
    missing = [k for k in _act_points(graph) if k not in ranges]
    if missing:
        raise QuantError(f"uncalibrated tensors: {missing[:4]}{'...' if len(missing) > 4 else ''}")
    act = {k: choose_qparams(*v) for k, v in ranges.items()}
    convs: dict = {}
    adds: dict = {}

    def quant_seq(seq, in_q: QParams) -> QParams:
        q = in_q
        for i, spec in enumerate(seq):
            if spec.kind in (LayerKind.CONV2D, LayerKind.DEPTHWISE, LayerKind.POINTWISE):
                bn, relu = seq[i + 1], seq[i + 2]
                if bn.kind != LayerKind.BATCHNORM or relu.kind != LayerKind.RELU6:
                    raise QuantError(f"{spec.name}: expected Conv-BN-ReLU6, got {bn.kind}/{relu.kind}")
                w = params[f"{spec.name}.weight"].astype(np.float64)
                w_q = _weight_qparams(w)
                out_q = act[relu.name]
                gamma = params[f"{bn.name}.gamma"].astype(np.float64)
                beta = params[f"{bn.name}.beta"].astype(np.float64)
                mean = params[f"{bn.name}.running_mean"].astype(np.float64)
                var = params[f"{bn.name}.running_var"].astype(np.float64)
                a = gamma / np.sqrt(var + K.BN_EPS)
                b = beta - a * mean
                acc_scale = q.scale * w_q.scale
                M = a * acc_scale / out_q.scale
                ms = [quantize_multiplier(float(v)) for v in M]
                with np.errstate(divide="ignore", invalid="ignore"):
                    B = np.where(a != 0, b / (a * acc_scale), 0.0)
                B = np.clip(round_half_away(B), -INT32_MAX, INT32_MAX)
                convs[spec.name] = QConv(
                    spec.name, quantize(w, w_q), w_q, q, out_q,
                    np.array([m for m, _ in ms], np.int32), np.array([s for _, s in ms], np.int32),
                    B.astype(np.int32), M, b / out_q.scale,
                )
                q = out_q
        return q

    x_q = quant_seq(graph.stem, act[INPUT])
    for block in graph.blocks:
        main_q = quant_seq(block.main, x_q)
        if block.bypass:
            byp_q = quant_seq(block.bypass, x_q)
            out_q = act[f"{block.name}.add"]
            M1, M2 = main_q.scale / out_q.scale, byp_q.scale / out_q.scale
            s = 30 - math.frexp(max(M1, M2))[1] + 1
            s = int(min(max(s, 1), 62))
            adds[block.name] = QAdd(f"{block.name}.add", main_q, byp_q, out_q,
                                    int(round_half_away(M1 * 2**s)), int(round_half_away(M2 * 2**s)), s)
            x_q = out_q
        else:
            x_q = main_q
    heads = []
    for spec in graph.heads:
        w = params[f"{spec.name}.weight"].astype(np.float64)
        w_q = _weight_qparams(w)
        bias = round_half_away(params[f"{spec.name}.bias"].astype(np.float64) / (x_q.scale * w_q.scale))
        heads.append(QHead(spec.name, quantize(w, w_q), w_q, x_q,
                           np.clip(bias, -INT32_MAX, INT32_MAX).astype(np.int32)))
    return QuantizedGraph(graph, act[INPUT], convs, adds, tuple(heads))


# --- integer inference -----------------------------------------------------------------------

def integer_accumulate(spec, q_in: np.ndarray, qc: QConv) -> np.ndarray:
    """Exact int64 accumulator; float64 sums of these small integers are exact."""
    x = q_in.astype(np.float64) - qc.in_q.zero_point
    w = qc.weight.astype(np.float64) - qc.w_q.zero_point
    if spec.kind == LayerKind.CONV2D:
        acc = K.conv2d(x, w, None, spec)
    elif spec.kind == LayerKind.DEPTHWISE:
        acc = K.depthwise_conv2d(x, w, None, spec)
    else:
        acc = K.pointwise_conv2d(x, w, None, spec)
    return np.rint(acc).astype(np.int64)


def conv_triplet_int(spec, q_in: np.ndarray, qc: QConv) -> np.ndarray:
    acc = integer_accumulate(spec, q_in, qc)
    c = (None, slice(None), None, None)
    r = requantize(acc, qc.multiplier.astype(np.int64)[c], qc.shift.astype(np.int64)[c],
                   qc.bias.astype(np.int64)[c])
    lo, hi = qc.clamp
    return np.clip(r + qc.out_q.zero_point, lo, hi).astype(np.uint8)


def add_int(q_main: np.ndarray, q_byp: np.ndarray, qa: QAdd) -> np.ndarray:
    v = (q_main.astype(np.int64) - qa.main_q.zero_point) * qa.m_main
    v = v + (q_byp.astype(np.int64) - qa.bypass_q.zero_point) * qa.m_bypass
    return np.clip(rshift_round(v, qa.shift) + qa.out_q.zero_point, QMIN, QMAX).astype(np.uint8)


def maxpool_int(q: np.ndarray, spec) -> np.ndarray:
    return K.maxpool2d(q, spec)


def head_int(flat: np.ndarray, qh: QHead) -> np.ndarray:
    """Dequantized head output, computed from the exact int32 accumulator."""
    x = flat.astype(np.int64) - qh.in_q.zero_point
    w = qh.weight.astype(np.int64) - qh.w_q.zero_point
    acc = x @ w.T + qh.bias.astype(np.int64)
    return acc[:, 0].astype(np.float64) * (qh.in_q.scale * qh.w_q.scale)


def _as_batch(images_u8) -> np.ndarray:
    x = np.asarray(images_u8)
    if x.dtype != np.uint8:
        raise QuantError(f"quantized inference takes uint8 images, got {x.dtype}")
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    return x


def quantized_forward(qg: QuantizedGraph, images_u8, trace: bool = False):
    """Integer pipeline on uint8 images; returns ``(yaw, p_coll)`` float arrays.

    The uint8 image already is the input code (scale 1/255 by construction when
    calibrated on [0, 1] inputs); other input ranges are requantized first.
    With ``trace`` set, also returns every intermediate uint8 tensor by name.
    """
    x = _as_batch(images_u8)
    if not (qg.input_q.zero_point == 0 and math.isclose(qg.input_q.scale, 1 / 255, rel_tol=1e-9)):
        x = quantize(x.astype(np.float64) / 255.0, qg.input_q)
    tr = {INPUT: x} if trace else None

    def run(seq, h):
        for spec in seq:
            if spec.name in qg.convs:
                h = conv_triplet_int(spec, h, qg.convs[spec.name])
                if tr is not None:
                    tr[f"{spec.name}_relu"] = h
            elif spec.kind == LayerKind.MAXPOOL:
                h = maxpool_int(h, spec)
                if tr is not None:
                    tr[spec.name] = h
        return h

    h = run(qg.graph.stem, x)
    for block in qg.graph.blocks:
        main = run(block.main, h)
        if block.bypass:
            main = add_int(main, run(block.bypass, h), qg.adds[block.name])
            if tr is not None:
                tr[f"{block.name}.add"] = main
        h = main
    flat = h.reshape(h.shape[0], -1)
    yaw = head_int(flat, qg.heads[0])
    p = K.sigmoid(head_int(flat, qg.heads[1]))
    return (yaw, p, tr) if trace else (yaw, p)


def quantized_predictor(qg: QuantizedGraph, batch_size: int = 128):
    def predict(images_u8):
        x = _as_batch(images_u8)
        ys, ps = [], []
        for i in range(0, len(x), batch_size):
            y, p = quantized_forward(qg, x[i:i + batch_size])
            ys.append(y)
            ps.append(p)
        return np.concatenate(ys), np.concatenate(ps)
    return predict


def requant_error_budget(qc: QConv, acc: np.ndarray) -> np.ndarray:
    """Per-element bound, in output codes, between the integer triplet and an exact float evaluation.

    Sources: the final rounding (1 code), the int32 bias rounding (|M|/2) and the
    fixed-point multiplier error ``|M - m/2**s| * |acc + B|``.
    """
    M = qc.float_scale[None, :, None, None]
    Mq = (qc.multiplier.astype(np.float64) / np.exp2(qc.shift.astype(np.float64)))[None, :, None, None]
    v = np.abs(acc.astype(np.float64) + qc.bias.astype(np.float64)[None, :, None, None])
    return 1 + np.ceil(np.abs(M) / 2 + np.abs(M - Mq) * v)


# --- comparison ------------------------------------------------------------------------------

def compare_fp32_int8(graph: ModelGraph, params: Params, qg: QuantizedGraph, images_u8: np.ndarray,
                      yaw_true: np.ndarray, coll_true: np.ndarray, threshold: float = 0.5) -> dict:
    """Paired float/int8 metrics and per-sample output deltas."""
    from .train import metrics_from_predictions, predict

    if qg.graph.config != graph.config:
        raise QuantError(f"architecture mismatch: {qg.graph.config.label} vs {graph.config.label}")
    yf, pf = predict(graph, params, images_u8)
    yq, pq = quantized_predictor(qg)(images_u8)
    mf = metrics_from_predictions(yf, yaw_true, pf, coll_true, threshold)
    mq = metrics_from_predictions(yq, yaw_true, pq, coll_true, threshold)
    err_delta = np.abs(yq - yaw_true) - np.abs(yf - yaw_true)
    return {
        "n": int(len(yaw_true)),
        "fp32_rmse": mf.rmse, "int8_rmse": mq.rmse, "rmse_delta": mq.rmse - mf.rmse,
        "fp32_acc": mf.accuracy, "int8_acc": mq.accuracy, "acc_delta": mq.accuracy - mf.accuracy,
        "yaw_abs_delta_mean": float(np.mean(np.abs(yq - yf))),
        "yaw_abs_delta_max": float(np.max(np.abs(yq - yf))),
        "p_abs_delta_mean": float(np.mean(np.abs(pq - pf))),
        "p_abs_delta_max": float(np.max(np.abs(pq - pf))),
        "decision_flips": int(np.sum((pq >= threshold) != (pf >= threshold))),
        "err_delta_sign": {"worse": int(np.sum(err_delta > 0)), "better": int(np.sum(err_delta < 0)),
                           "same": int(np.sum(err_delta == 0))},
    }


# --- file format --------------------------------------------------------------------------------

def _qp(q: QParams) -> list:
    return [q.scale, q.zero_point]


def dumps_quantized(qg: QuantizedGraph) -> bytes:
    """``TDQM`` | u32 version | u32 header length | JSON header | uint8 weights | int32 metadata."""
    cfg = qg.graph.config
    weights: list[bytes] = []
    ints: list[np.ndarray] = []
    w_off = i_off = 0
    layers = []
    for name, c in qg.convs.items():
        weights.append(c.weight.tobytes())
        meta = np.concatenate([c.multiplier, c.shift, c.bias]).astype("<i4")
        ints.append(meta)
        layers.append({"name": name, "w_offset": w_off, "w_shape": list(c.weight.shape), "w_q": _qp(c.w_q),
                       "in_q": _qp(c.in_q), "out_q": _qp(c.out_q), "meta_offset": i_off,
                       "channels": int(c.multiplier.size),
                       "float_scale": [float(v) for v in c.float_scale],
                       "float_bias": [float(v) for v in c.float_bias]})
        w_off += c.weight.size
        i_off += meta.size
    heads = []
    for h in qg.heads:
        weights.append(h.weight.tobytes())
        ints.append(h.bias.astype("<i4"))
        heads.append({"name": h.name, "w_offset": w_off, "w_shape": list(h.weight.shape), "w_q": _qp(h.w_q),
                      "in_q": _qp(h.in_q), "meta_offset": i_off})
        w_off += h.weight.size
        i_off += h.bias.size
    adds = [{"block": k, "main_q": _qp(a.main_q), "bypass_q": _qp(a.bypass_q), "out_q": _qp(a.out_q),
             "m_main": a.m_main, "m_bypass": a.m_bypass, "shift": a.shift} for k, a in qg.adds.items()]
    header = {
        "config": {"block_kind": cfg.block_kind.value, "use_bypass": cfg.use_bypass, "gamma": cfg.gamma,
                   "expansion": cfg.expansion, "input_h": cfg.input_h, "input_w": cfg.input_w,
                   "input_ch": cfg.input_ch},
        "input_q": _qp(qg.input_q), "layers": layers, "heads": heads, "adds": adds,
        "weight_bytes": w_off, "meta_words": i_off,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    blob_i = np.concatenate(ints).astype("<i4").tobytes() if ints else b""
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + b"".join(weights) + blob_i


def loads_quantized(data: bytes) -> QuantizedGraph:
    if data[:4] != MAGIC:
        raise QuantError("not a quantized model file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise QuantError(f"unsupported format version {version}")
    header = json.loads(data[12:12 + hlen])
    wstart = 12 + hlen
    wblob = np.frombuffer(data, np.uint8, header["weight_bytes"], wstart)
    iblob = np.frombuffer(data, "<i4", header["meta_words"], wstart + header["weight_bytes"])
    c = header["config"]
    graph = build_model(ArchConfig(BlockKind(c["block_kind"]), c["use_bypass"], c["gamma"], c["expansion"],
                                   c["input_h"], c["input_w"], c["input_ch"]))
    qp = lambda v: QParams(float(v[0]), int(v[1]))  # noqa: E731
    convs = {}
    for L in header["layers"]:
        n = int(np.prod(L["w_shape"]))
        ch, o = L["channels"], L["meta_offset"]
        convs[L["name"]] = QConv(
            L["name"], wblob[L["w_offset"]:L["w_offset"] + n].reshape(L["w_shape"]).copy(), qp(L["w_q"]),
            qp(L["in_q"]), qp(L["out_q"]), iblob[o:o + ch].astype(np.int32),
            iblob[o + ch:o + 2 * ch].astype(np.int32), iblob[o + 2 * ch:o + 3 * ch].astype(np.int32),
            np.array(L["float_scale"]), np.array(L["float_bias"]))
    heads = []
    for H in header["heads"]:
        n = int(np.prod(H["w_shape"]))
        heads.append(QHead(H["name"], wblob[H["w_offset"]:H["w_offset"] + n].reshape(H["w_shape"]).copy(),
                           qp(H["w_q"]), qp(H["in_q"]), iblob[H["meta_offset"]:H["meta_offset"] + 1].astype(np.int32)))
    adds = {A["block"]: QAdd(f"{A['block']}.add", qp(A["main_q"]), qp(A["bypass_q"]), qp(A["out_q"]),
                             A["m_main"], A["m_bypass"], A["shift"]) for A in header["adds"]}
    return QuantizedGraph(graph, qp(header["input_q"]), convs, adds, tuple(heads))


def save_quantized(qg: QuantizedGraph, path: str | Path) -> None:
    Path(path).write_bytes(dumps_quantized(qg))


def load_quantized(path: str | Path) -> QuantizedGraph:
    return loads_quantized(Path(path).read_bytes())


def quantize_from_images(graph: ModelGraph, params: Params, calib_u8: np.ndarray,
                         n: int = 512) -> QuantizedGraph:
    return quantize_model(graph, params, calibrate_activations(graph, params, calib_u8, n))
