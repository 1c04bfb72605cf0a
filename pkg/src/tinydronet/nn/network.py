"""Whole-model forward/backward over a :class:`ModelGraph`."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..model import LayerKind, LayerSpec, ModelGraph
from . import kernels as K

Params = dict  # name -> np.ndarray, e.g. "stem.conv.weight", "stem.conv_bn.running_var"

TRAINABLE_SUFFIXES = (".weight", ".bias", ".gamma", ".beta")


def init_params(graph: ModelGraph, seed: int = 0, dtype=np.float32) -> Params:
    """He-normal conv/FC weights, identity BN, zero biases."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for spec in graph.layers():
        if spec.kind == LayerKind.BATCHNORM:
            params[f"{spec.name}.gamma"] = np.ones(spec.out_ch, dtype)
            params[f"{spec.name}.beta"] = np.zeros(spec.out_ch, dtype)
            params[f"{spec.name}.running_mean"] = np.zeros(spec.out_ch, dtype)
            params[f"{spec.name}.running_var"] = np.ones(spec.out_ch, dtype)
        elif spec.weight_shape is not None:
            shape = spec.weight_shape
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in) if spec.kind != LayerKind.FULLY_CONNECTED else np.sqrt(1.0 / fan_in)
            params[f"{spec.name}.weight"] = (rng.standard_normal(shape) * std).astype(dtype)
            if spec.bias:
                params[f"{spec.name}.bias"] = np.zeros(spec.out_ch, dtype)
    return params


def zero_params(graph: ModelGraph, dtype=np.float32) -> Params:
    params = init_params(graph, 0, dtype)
    for k in params:
        if k.endswith(".weight") or k.endswith(".bias"):
            params[k][...] = 0
    return params


def trainable_keys(params: Params) -> list[str]:
    return [k for k in params if k.endswith(TRAINABLE_SUFFIXES)]


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class ForwardTrace:
    """Per-layer cached inputs (and outputs/BN caches where backward needs them)."""
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    bn_cache: dict = field(default_factory=dict)
    features: Optional[np.ndarray] = None
    logit: Optional[np.ndarray] = None
    mode: str = "infer"
    n_layers: int = 0


def apply_layer(spec: LayerSpec, x: np.ndarray, params: Params, mode: str = "infer",
                trace: Optional[ForwardTrace] = None) -> np.ndarray:
    w = params.get(f"{spec.name}.weight")
    b = params.get(f"{spec.name}.bias")
    kind = spec.kind
    if kind == LayerKind.CONV2D:
        y = K.conv2d(x, w, b, spec)
    elif kind == LayerKind.DEPTHWISE:
        y = K.depthwise_conv2d(x, w, b, spec)
    elif kind == LayerKind.POINTWISE:
        y = K.pointwise_conv2d(x, w, b, spec)
    elif kind == LayerKind.BATCHNORM:
        y, cache = K.batchnorm(
            x, params[f"{spec.name}.gamma"], params[f"{spec.name}.beta"],
            params[f"{spec.name}.running_mean"], params[f"{spec.name}.running_var"], mode,
        )
        if trace is not None:
            trace.bn_cache[spec.name] = cache
    elif kind == LayerKind.RELU6:
        y = K.relu6(x)
    elif kind == LayerKind.MAXPOOL:
        y = K.maxpool2d(x, spec)
    elif kind == LayerKind.FULLY_CONNECTED:
        y = K.fully_connected(x, w, b)
    else:  # pragma: no cover
        raise ValueError(kind)
    if trace is not None:
        trace.inputs[spec.name] = x
        trace.n_layers += 1
        if kind == LayerKind.MAXPOOL:
            trace.outputs[spec.name] = y
    return y


def _run(seq, x, params, mode, trace):
    for spec in seq:
        x = apply_layer(spec, x, params, mode, trace)
    return x


def forward_features(graph: ModelGraph, params: Params, x: np.ndarray, mode: str = "infer",
                     trace: Optional[ForwardTrace] = None) -> np.ndarray:
    x = _run(graph.stem, x, params, mode, trace)
    for block in graph.blocks:
        main = _run(block.main, x, params, mode, trace)
        if block.bypass:
            main = main + _run(block.bypass, x, params, mode, trace)
        x = main
    return x


def model_forward(graph: ModelGraph, params: Params, x: np.ndarray, trace: bool = False,
                  mode: str = "infer"):
    """Evaluate both heads.

    ``x`` is ``(N, 1, H, W)`` with pixel values scaled to [0, 1]. Returns
    ``(yaw, p_coll)`` arrays of shape ``(N,)``, plus the :class:`ForwardTrace`
    when ``trace`` is set.
    """
    cfg = graph.config
    if cfg is not None and (x.ndim != 4 or x.shape[1:] != (cfg.input_ch, cfg.input_h, cfg.input_w)):
        raise K.ShapeError(f"expected (N, {cfg.input_ch}, {cfg.input_h}, {cfg.input_w}), got {x.shape}")
    tr = ForwardTrace(mode=mode) if trace else None
    feats = forward_features(graph, params, x, mode, tr)
    flat = feats.reshape(feats.shape[0], -1)
    yaw_spec, coll_spec = graph.heads
    yaw = apply_layer(yaw_spec, flat, params, mode, tr)[:, 0]
    logit = apply_layer(coll_spec, flat, params, mode, tr)[:, 0]
    p = K.sigmoid(logit)
    if tr is not None:
        tr.features = feats
        tr.logit = logit
        return yaw, p, tr
    return yaw, p


def _layer_backward(spec: LayerSpec, grad, params: Params, trace: ForwardTrace, grads: Params, need_dx=True):
    x = trace.inputs[spec.name]
    kind = spec.kind
    w = params.get(f"{spec.name}.weight")
    if kind == LayerKind.CONV2D:
        dx, dw, db = K.conv2d_backward(x, w, grad, spec, need_dx)
    elif kind == LayerKind.DEPTHWISE:
        dx, dw, db = K.depthwise_backward(x, w, grad, spec, need_dx)
    elif kind == LayerKind.POINTWISE:
        dx, dw, db = K.pointwise_backward(x, w, grad, spec, need_dx)
    elif kind == LayerKind.FULLY_CONNECTED:
        dx, dw, db = K.fully_connected_backward(x, w, grad, need_dx)
    elif kind == LayerKind.BATCHNORM:
        dx, dg, dbeta = K.batchnorm_backward(grad, params[f"{spec.name}.gamma"], trace.bn_cache[spec.name])
        grads[f"{spec.name}.gamma"] = dg
        grads[f"{spec.name}.beta"] = dbeta
        return dx
    elif kind == LayerKind.RELU6:
        return K.relu6_backward(x, grad)
    elif kind == LayerKind.MAXPOOL:
        return K.maxpool2d_backward(x, trace.outputs[spec.name], grad, spec)
    else:  # pragma: no cover
        raise ValueError(kind)
    grads[f"{spec.name}.weight"] = dw
    if spec.bias:
        grads[f"{spec.name}.bias"] = db
    return dx


def _seq_backward(seq, grad, params, trace, grads, skip_first_dx=False):
    for i, spec in enumerate(reversed(seq)):
        last = i == len(seq) - 1
        grad = _layer_backward(spec, grad, params, trace, grads, need_dx=not (skip_first_dx and last))
    return grad


def model_backward(graph: ModelGraph, params: Params, trace: Optional[ForwardTrace], loss_grads) -> Params:
    """Gradients of a scalar loss w.r.t. every trainable parameter.

    ``loss_grads = (d_yaw, d_logit)``: loss derivatives w.r.t. the yaw output
    and the pre-sigmoid collision logit, each shape ``(N,)``.
    """
    if trace is None or trace.features is None:
        raise ValueError("model_backward needs the ForwardTrace of the same forward pass")
    d_yaw, d_logit = (np.asarray(g, dtype=trace.features.dtype) for g in loss_grads)
    grads: Params = {}
    yaw_spec, coll_spec = graph.heads
    d_flat = _layer_backward(yaw_spec, d_yaw[:, None], params, trace, grads)
    d_flat = d_flat + _layer_backward(coll_spec, d_logit[:, None], params, trace, grads)
    grad = d_flat.reshape(trace.features.shape)
    for block in reversed(graph.blocks):
        g_main = _seq_backward(block.main, grad, params, trace, grads)
        if block.bypass:
            g_main = g_main + _seq_backward(block.bypass, grad, params, trace, grads)
        grad = g_main
    _seq_backward(graph.stem, grad, params, trace, grads, skip_first_dx=True)
    return grads
