import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydronet import deploy as DP
from tinydronet.model import ArchConfig, build_model, count_macs

from oracles import l1_footprint

configs = st.builds(ArchConfig, st.sampled_from(["RB", "DP", "IRLB"]), st.booleans(),
                    st.sampled_from([1, 2, 4, 8]), st.integers(1, 6))


def independent_check(plan, l1=65536):
    """Own footprint arithmetic and a coverage count, sharing nothing with the planner."""
    for lt in plan.layers:
        L = lt.layer
        cover = np.zeros((L.out_ch, L.out_h), int)
        for t in lt.tiles:
            cover[t.c0:t.c1, t.r0:t.r1] += 1
            if L.kind == "fully_connected":
                n = t.c1 - t.c0
                in_b, out_b, w_b = L.in_ch * L.in_h * L.in_w, n, n * (L.in_ch * L.in_h * L.in_w + 4)
            else:
                in_b, out_b, w_b = l1_footprint(L.kind, L.in_ch, L.in_h, L.in_w, L.out_w, L.kernel, L.stride,
                                                L.pad, L.n_inputs, t.r0, t.r1, t.c0, t.c1)
            assert (t.in_bytes, t.out_bytes, t.weight_bytes) == (in_b, out_b, w_b), (L.name, t)
            assert 2 * (in_b + out_b) + w_b <= l1, (L.name, t)
        assert np.all(cover == 1), L.name


@settings(max_examples=25, deadline=None)
@given(configs)
def test_every_tile_fits_and_covers(cfg):
    # the widest residual variants exceed L2 outright; tiling is about L1, so lift that limit here
    plan = DP.plan_tiling(build_model(cfg), DP.HardwareModel(l2_bytes=1 << 24))
    independent_check(plan)
    assert DP.check_plan(plan) == []


@pytest.mark.parametrize("gamma", [1, 2, 4, 8])
def test_tiny_family_tiling(gamma):
    plan = DP.plan_tiling(DP.tiny_graph(gamma))
    independent_check(plan)
    assert plan.peak_l1 <= 65536
    stem = plan.layer("stem.conv")
    if gamma == 1:
        assert 32 * 100 * 100 > 65536 and not stem.untiled
    # a 200x200 input frame alone is 40 kB, so double buffering forces the stem into rows at every width
    assert not stem.untiled
    if gamma == 8:
        late = [lt for lt in plan.layers if lt.layer.name.startswith(("block2", "block3", "head"))]
        assert all(lt.untiled for lt in late)


def test_degenerate_layer_is_one_tile():
    L = DP.DeployLayer("x", "conv2d", 1, 1, 1, 1, 1, 1)
    lt = DP.tile_layer(L)
    assert lt.untiled and lt.tiles[0].in_bytes == 1


def test_infeasible_layer_raises():
    L = DP.DeployLayer("huge", "conv2d", 4096, 8, 8, 8, 8, 8, kernel=3, pad=1)
    with pytest.raises(DP.TilingError):
        DP.tile_layer(L)
    with pytest.raises(DP.TilingError):
        DP.plan_tiling(build_model(ArchConfig("RB", True, 1)), DP.HardwareModel(l1_bytes=65536, l2_bytes=70000))


def test_checker_catches_bad_plans():
    plan = DP.plan_tiling(DP.tiny_graph(8))
    lt = plan.layers[0]
    lt.tiles = lt.tiles[1:]
    assert any("cover" in p for p in DP.check_plan(plan))
    plan = DP.plan_tiling(DP.tiny_graph(8))
    small = DP.HardwareModel(l1_bytes=4096)
    assert any("L1" in p for p in DP.check_plan(plan, small))


def test_tile_rows_are_maximal():
    for lt in DP.plan_tiling(DP.tiny_graph(2)).layers:
        if lt.tile_rows < lt.layer.out_h and lt.tile_ch == lt.layer.out_ch:
            bigger = lt.tile_rows + 1
            worst = max(2 * sum(lt.layer.tile_bytes(r0, min(r0 + bigger, lt.layer.out_h), 0, lt.tile_ch)[:2])
                        + lt.layer.weight_bytes()
                        for r0 in range(0, lt.layer.out_h))
            assert worst > 65536


# --- throughput / energy ---------------------------------------------------------------------

PUBLISHED = {1: (5.1e6, 34, 3.0, 2.1), 2: (2.9e6, 61, 1.7, 1.1), 4: (1.7e6, 101, 1.0, 0.6), 8: (1.3e6, 139, 0.7, 0.4)}


def test_estimator_examples():
    assert DP.estimate_throughput(5.1e6) == pytest.approx(34.3, abs=0.05)
    assert DP.estimate_throughput(1.3e6) == pytest.approx(134.6, abs=0.05)
    assert DP.estimate_throughput(2.6e6) == pytest.approx(DP.estimate_throughput(1.3e6) / 2)
    assert DP.estimate_energy(5.1e6) == pytest.approx(2.914, abs=1e-3)
    assert DP.estimate_energy(1.3e6, config="ee", gamma=8) == pytest.approx(0.442, abs=1e-3)
    assert DP.estimate_energy(1e6, power_mw=0.0) == 0.0
    with pytest.raises(DP.DeployError):
        DP.estimate_throughput(0)
    with pytest.raises(DP.DeployError):
        DP.estimate_energy(1e6, config="turbo")


@given(st.floats(1e3, 1e9), st.sampled_from(["mp", "ee"]))
def test_fps_cycle_identity(cycles, cfg):
    hz = DP.GAP8.config(cfg).cluster_hz
    assert DP.estimate_throughput(cycles, config=cfg) * cycles == pytest.approx(hz, rel=1e-12)


def test_ee_power_table():
    assert [DP.GAP8.power_mw("ee", g) for g in (1, 2, 4, 8)] == [38.0, 38.0, 34.0, 34.0]
    with pytest.raises(DP.DeployError):
        DP.HardwareModel(l1_bytes=10**6).validate()


@pytest.mark.parametrize("gamma", [1, 2, 4, 8])
def test_calibrated_cycles_near_published(gamma):
    rep = DP.generate_report(DP.tiny_graph(gamma))
    cycles = PUBLISHED[gamma][0]
    assert abs(rep.total_cycles / cycles - 1) <= 0.25
    assert rep.fps["mp"] * rep.total_cycles == pytest.approx(175e6)
    assert rep.peak_l1 == DP.plan_tiling(DP.tiny_graph(gamma)).peak_l1
    assert rep.total_macs == count_macs(DP.tiny_graph(gamma))


def test_depthwise_less_efficient_and_mac_per_cycle_falls():
    cm = DP.load_cycle_model()
    assert cm.eta_peak["depthwise"] < cm.eta_peak["pointwise"]
    mpc = [DP.generate_report(DP.tiny_graph(g)).mac_per_cycle for g in (1, 2, 4, 8)]
    assert all(a > b for a, b in zip(mpc, mpc[1:]))


def test_tiny_report_speedup_and_determinism():
    a = DP.generate_report(DP.tiny_graph(8))
    assert a.fps_mp >= 7 * 19
    assert a.to_jsonl() == DP.generate_report(DP.tiny_graph(8)).to_jsonl()
    assert "TOTAL" in a.table()


def test_cycle_model_refit_matches_shipped_file(tmp_path):
    fitted = DP.fit_cycle_model()
    shipped = DP.load_cycle_model()
    for k in shipped.eta_peak:
        assert math.isclose(fitted.eta_peak[k], shipped.eta_peak[k], rel_tol=1e-3, abs_tol=1e-4)
    (tmp_path / "c.json").write_text(fitted.to_json())
    assert DP.load_cycle_model(tmp_path / "c.json") == fitted
    (tmp_path / "bad.json").write_text('{"version": 9}')
    with pytest.raises(DP.DeployError):
        DP.load_cycle_model(tmp_path / "bad.json")
