import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydronet import quant as Q
from tinydronet.model import ArchConfig, build_model, count_params, count_weights
from tinydronet.nn import kernels as K
from tinydronet.nn.network import init_params, zero_params
from tinydronet.train import predict

from oracles import affine_roundtrip, dequant_float_codes

ranges = st.tuples(st.floats(-50, 0), st.floats(0, 50)).filter(lambda r: r[1] - r[0] > 1e-2)


def randomized_params(graph, seed):
    """He-init weights plus non-trivial BN statistics so folding is exercised."""
    rng = np.random.default_rng(seed)
    p = init_params(graph, seed, dtype=np.float64)
    for k in p:
        if k.endswith(".gamma"):
            p[k] = rng.uniform(0.5, 1.5, p[k].shape)
        elif k.endswith(".beta"):
            p[k] = rng.normal(0.2, 0.3, p[k].shape)
        elif k.endswith(".running_mean"):
            p[k] = rng.normal(0, 0.3, p[k].shape)
        elif k.endswith(".running_var"):
            p[k] = rng.uniform(0.3, 2.0, p[k].shape)
        elif k.endswith(".bias"):
            p[k] = rng.normal(0, 0.1, p[k].shape)
    return p


@pytest.fixture(scope="module")
def tiny():
    graph = build_model(ArchConfig("DP", False, 8))
    params = randomized_params(graph, 0)
    rng = np.random.default_rng(1)
    calib = rng.integers(0, 256, (64, 1, 200, 200)).astype(np.uint8)
    qg = Q.quantize_model(graph, params, Q.calibrate_activations(graph, params, calib))
    return graph, params, qg


# --- scalar quantization --------------------------------------------------------------

@settings(max_examples=300)
@given(ranges, st.floats(0, 1))
def test_roundtrip_within_half_scale(r, frac):
    lo, hi = r
    qp = Q.choose_qparams(lo, hi)
    x = lo + frac * (hi - lo)
    err = abs(float(Q.dequantize(Q.quantize(x, qp), qp)) - x)
    assert err <= qp.scale / 2 * (1 + 1e-9)
    want, scale = affine_roundtrip(x, lo, hi)
    assert math.isclose(scale, qp.scale) and math.isclose(float(Q.dequantize(Q.quantize(x, qp), qp)), want,
                                                         abs_tol=1e-12)


def test_qparams_invariants_and_degenerate_range():
    qp = Q.choose_qparams(0.0, 0.0)
    assert qp.scale > 0 and qp.scale * 255 == pytest.approx(Q.MIN_SPAN)
    assert Q.choose_qparams(-1, 1).zero_point in range(256)
    with pytest.raises(Q.QuantError):
        Q.QParams(0.0, 0)
    with pytest.raises(Q.QuantError):
        Q.QParams(1.0, 300)


def test_zero_weights_are_exact():
    w = np.zeros((4, 1, 3, 3))
    qp = Q.choose_qparams(w.min(), w.max())
    np.testing.assert_array_equal(Q.dequantize(Q.quantize(w, qp), qp), w)
    w = np.array([-0.3, 0.0, 0.7])
    qp = Q.choose_qparams(w.min(), w.max())
    assert Q.dequantize(Q.quantize(0.0, qp), qp) == 0.0  # zero always representable


@given(ranges, st.lists(st.floats(-60, 60), min_size=2, max_size=20))
def test_quantize_is_monotone(r, xs):
    qp = Q.choose_qparams(*r)
    xs = np.sort(np.array(xs))
    assert np.all(np.diff(Q.quantize(xs, qp).astype(int)) >= 0)


@given(st.floats(1e-9, 1e3))
def test_multiplier_representation(M):
    m, s = Q.quantize_multiplier(M)
    if m == 0:
        assert M < 2 ** -31
        return
    assert 2**30 <= m < 2**31 and s >= 1
    assert abs(m / 2**s - M) <= 2.0 ** -(s + 1) * (1 + 1e-12)


@given(st.integers(-2**40, 2**40), st.integers(1, 40))
def test_rshift_round_is_half_away(v, s):
    from fractions import Fraction
    exact = Fraction(v, 2**s)
    mag = math.floor(abs(exact) + Fraction(1, 2))
    assert int(Q.rshift_round(np.array([v]), s)[0]) == (mag if v >= 0 else -mag)


# --- calibration ------------------------------------------------------------------------

def test_calibration_ranges(tiny):
    graph, params, _ = tiny
    rng = np.random.default_rng(5)
    imgs = rng.integers(0, 256, (40, 1, 200, 200)).astype(np.uint8)
    r20 = Q.calibrate_activations(graph, params, imgs, n=20)
    r40 = Q.calibrate_activations(graph, params, imgs, n=40)
    for k, (lo, hi) in r40.items():
        if k != Q.INPUT:
            assert 0.0 <= hi <= 6.0 and lo == 0.0
        assert lo <= r20[k][0] and hi >= r20[k][1]
    const = Q.calibrate_activations(graph, params, np.full((2, 1, 200, 200), 0, np.uint8))
    assert all(hi - lo >= Q.MIN_SPAN * (1 - 1e-12) for lo, hi in const.values())
    with pytest.raises(Q.QuantError):
        Q.calibrate_activations(graph, params, np.zeros((0, 1, 200, 200), np.uint8))


def test_uncalibrated_layer_rejected(tiny):
    graph, params, _ = tiny
    r = Q.calibrate_activations(graph, params, np.zeros((1, 1, 200, 200), np.uint8))
    r.pop("block2.main.pw1_relu")
    with pytest.raises(Q.QuantError, match="uncalibrated"):
        Q.quantize_model(graph, params, r)


# --- integer pipeline ----------------------------------------------------------------------

def test_per_layer_deltas_within_budget(tiny):
    """100 random inputs: every Conv-BN-ReLU6 layer's int8 output against a dequantize-then-float oracle."""
    graph, params, qg = tiny
    rng = np.random.default_rng(2)
    imgs = rng.integers(0, 256, (100, 1, 200, 200)).astype(np.uint8)
    _, _, trace = Q.quantized_forward(qg, imgs, trace=True)
    prev = Q.INPUT
    checked = 0
    for spec in graph.layers():
        if spec.kind.value == "maxpool":
            prev = spec.name
            continue
        if spec.name not in qg.convs:
            continue
        qc = qg.convs[spec.name]
        q_in = trace[prev]
        bn = f"{spec.name}_bn"
        ref = dequant_float_codes(
            q_in, (qc.in_q.scale, qc.in_q.zero_point), qc.weight, (qc.w_q.scale, qc.w_q.zero_point),
            params[f"{bn}.gamma"], params[f"{bn}.beta"], params[f"{bn}.running_mean"],
            params[f"{bn}.running_var"], K.BN_EPS, (qc.out_q.scale, qc.out_q.zero_point),
            spec.kind.value, spec.stride, spec.pad)
        got = trace[f"{spec.name}_relu"].astype(float)
        budget = Q.requant_error_budget(qc, Q.integer_accumulate(spec, q_in, qc))
        assert np.all(np.abs(got - ref) <= budget), spec.name
        # in practice the codes are within one step almost everywhere
        assert np.mean(np.abs(got - ref) <= 1) > 0.999
        prev = f"{spec.name}_relu"
        checked += 1
    assert checked == len(qg.convs)


def test_end_to_end_close_to_float(tiny):
    graph, params, qg = tiny
    imgs = np.random.default_rng(3).integers(0, 256, (32, 1, 200, 200)).astype(np.uint8)
    yf, pf = predict(graph, params, imgs)
    yq, pq = Q.quantized_forward(qg, imgs)
    scale = max(np.std(yf), 1e-3)
    assert np.max(np.abs(yq - yf)) < 0.25 * scale + 0.05
    assert np.max(np.abs(pq - pf)) < 0.1


def test_zero_model_outputs():
    graph = build_model(ArchConfig("DP", False, 8))
    params = zero_params(graph)
    zeros = np.zeros((3, 1, 200, 200), np.uint8)
    qg = Q.quantize_model(graph, params, Q.calibrate_activations(graph, params, zeros))
    yaw, p = Q.quantized_forward(qg, zeros)
    np.testing.assert_array_equal(yaw, 0.0)
    np.testing.assert_array_equal(p, 0.5)


def test_batch_padding_invariance(tiny):
    _, _, qg = tiny
    imgs = np.random.default_rng(4).integers(0, 256, (3, 1, 200, 200)).astype(np.uint8)
    y1, p1 = Q.quantized_forward(qg, imgs)
    padded = np.concatenate([imgs, np.zeros((5, 1, 200, 200), np.uint8)])
    y2, p2 = Q.quantized_forward(qg, padded)
    np.testing.assert_array_equal(y1, y2[:3])
    np.testing.assert_array_equal(p1, p2[:3])
    with pytest.raises(Q.QuantError):
        Q.quantized_forward(qg, imgs.astype(np.float32))


@pytest.mark.parametrize("kind,bypass", [("RB", True), ("IRLB", True)])
def test_bypass_architectures_quantize(kind, bypass):
    graph = build_model(ArchConfig(kind, bypass, 8, expansion=2))
    params = randomized_params(graph, 1)
    imgs = np.random.default_rng(6).integers(0, 256, (8, 1, 200, 200)).astype(np.uint8)
    qg = Q.quantize_model(graph, params, Q.calibrate_activations(graph, params, imgs))
    assert set(qg.adds) == {"block1", "block2", "block3"}
    yf, pf = predict(graph, params, imgs)
    yq, pq = Q.quantized_forward(qg, imgs)
    assert np.max(np.abs(pq - pf)) < 0.15


def test_decisions_preserved_with_margin(tiny):
    """Samples far from the threshold keep their float decision: zero accuracy change."""
    graph, params, qg = tiny
    imgs = np.random.default_rng(8).integers(0, 256, (64, 1, 200, 200)).astype(np.uint8)
    yf, pf = predict(graph, params, imgs)
    keep = np.abs(pf - 0.5) > 0.05
    coll = (pf >= 0.5).astype(int)
    rep = Q.compare_fp32_int8(graph, params, qg, imgs[keep], yf[keep], coll[keep])
    assert rep["acc_delta"] == 0.0 and rep["decision_flips"] == 0
    assert sum(rep["err_delta_sign"].values()) == rep["n"]
    other = build_model(ArchConfig("DP", False, 4))
    with pytest.raises(Q.QuantError):
        Q.compare_fp32_int8(other, init_params(other), qg, imgs[:2], yf[:2], coll[:2])


# --- size and file format ------------------------------------------------------------------------

@pytest.mark.parametrize("gamma", [1, 2, 4, 8])
def test_size_identity(gamma):
    graph = build_model(ArchConfig("DP", False, gamma))
    params = init_params(graph)
    qg = Q.quantize_model(graph, params, Q.calibrate_activations(graph, params, np.zeros((1, 1, 200, 200),
                                                                                             np.uint8)))
    rep = qg.size_report()
    assert rep["weight_bytes"] == count_weights(graph) == rep["n_weights"]
    assert rep["int8_equivalent_bytes"] == count_params(graph)
    assert rep["fp32_bytes"] == 4 * rep["int8_equivalent_bytes"]
    assert rep["metadata_bytes"] > 0
    blob = Q.dumps_quantized(qg)
    assert len(blob) >= rep["weight_bytes"] + rep["metadata_bytes"] - 5 * 50


def test_file_roundtrip(tiny, tmp_path):
    _, _, qg = tiny
    Q.save_quantized(qg, tmp_path / "m.tdqm")
    back = Q.load_quantized(tmp_path / "m.tdqm")
    assert Q.dumps_quantized(back) == Q.dumps_quantized(qg)
    imgs = np.random.default_rng(9).integers(0, 256, (4, 1, 200, 200)).astype(np.uint8)
    for a, b in zip(Q.quantized_forward(qg, imgs), Q.quantized_forward(back, imgs)):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(Q.QuantError):
        Q.loads_quantized(b"NOPE" + Q.dumps_quantized(qg)[4:])
