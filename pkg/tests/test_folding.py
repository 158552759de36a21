import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from finnlite import folding as F
from finnlite.graph import DataflowGraph, GraphBuilder
from finnlite.qtensor import pack_bipolar

# (rows H, cols W, output positions) per CNV layer, worked out from the layer table by hand
CNV_DIMS = {
    "conv0": (64, 3 * 9, 30 * 30), "conv1": (64, 64 * 9, 28 * 28), "conv2": (128, 64 * 9, 12 * 12),
    "conv3": (128, 128 * 9, 10 * 10), "conv4": (256, 128 * 9, 3 * 3), "conv5": (256, 256 * 9, 1),
    "fc0": (512, 256, 1), "fc1": (512, 512, 1), "fc2": (1, 512, 1),
}


def divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def hand_cycles(cfg):
    return {k: (h // cfg.get(k).pe) * (w // cfg.get(k).simd) * s for k, (h, w, s) in CNV_DIMS.items()}


def test_cnv_layer_dims(built):
    dims = {d.id: (d.rows, d.cols, d.spatial) for d in F.layer_dims(built["cnv_w1a1"])}
    assert dims == CNV_DIMS
    assert dims == {d.id: (d.rows, d.cols, d.spatial) for d in F.layer_dims(built["cnv_w2a2"])}


def test_congruence_examples():
    assert F.congruence_violations("l", 64, 27, 16, 1) == []
    v = F.congruence_violations("l", 64, 27, 12, 1)
    assert v == ["PENotDivisor"] and "= 4" in v[0].detail
    assert F.congruence_violations("l", 64, 27, 1, 4) == ["SIMDNotDivisor"]
    assert F.congruence_violations("l", 64, 27, 128, 1) == ["PENotDivisor", "PEExceedsH"]
    assert F.congruence_violations("l", 64, 27, 0, 1) == ["NonPositiveFolding"]


def test_all_ones_valid_for_every_model(built):
    for g in built.values():
        assert F.validate_folding(g, F.FoldingConfig()) == []


def test_validate_reports_unknown_layer(built):
    f = F.FoldingConfig({"nope": F.LayerFold()})
    assert F.validate_folding(built["cnv_w1a1"], f) == ["UnknownLayer"]


def test_estimate_cycles_first_layer():
    d = F.LayerDims("conv0", 64, 27, 900)
    assert F.estimate_cycles(d, 1, 1) == 1_555_200
    assert F.estimate_cycles(d, 64, 27) == 900
    assert F.estimate_cycles(d, 2, 1) * 2 == F.estimate_cycles(d, 1, 1)
    with pytest.raises(F.InvalidFolding):
        F.estimate_cycles(d, 5, 1)


@given(st.integers(1, 600), st.integers(1, 600), st.integers(1, 1000), st.data())
def test_cycles_inverse_linear_in_lanes(h, w, s, data):
    d = F.LayerDims("x", h, w, s)
    pe = data.draw(st.sampled_from(divisors(h)))
    simd = data.draw(st.sampled_from(divisors(w)))
    assert F.estimate_cycles(d, pe, simd) * pe * simd == h * w * s


@given(st.integers(1, 600), st.integers(1, 600), st.integers(1, 600), st.integers(1, 600))
def test_all_ones_always_congruent(h, w, pe, simd):
    assert F.congruence_violations("x", h, w, 1, 1) == []
    ok = F.congruence_violations("x", h, w, pe, simd) == []
    assert ok == (h % pe == 0 and w % simd == 0)


def fc_chain(widths):
    b = GraphBuilder()
    b.add("Input", {"shape": [1, widths[0]], "bits": 8, "signed": False, "scale": 1.0}, id="input")
    for i, (a, o) in enumerate(zip(widths, widths[1:])):
        b.add("FC", {"out_features": o}, {"weight": pack_bipolar(np.ones((o, a)))}, id=f"fc{i}")
    b.add("Output", id="output")
    return b.finalize()


def test_single_layer_fps():
    g = fc_chain([40, 25])  # 25 * 40 = 1000 cycles
    r = F.report_throughput(g, F.FoldingConfig(clock_hz=1e6))
    assert r.cycles == {"fc0": 1000} and r.fps_estimate == 1000.0


def test_two_layer_bottleneck():
    g = fc_chain([40, 25, 80])  # 1000 and 2000 cycles
    r = F.report_throughput(g, F.FoldingConfig(), clock_hz=1e6)
    assert r.bottleneck == "fc1" and r.bottleneck_cycles == 2000 and r.fps_estimate == 500.0


def test_report_is_invariant_to_node_order(built):
    g = built["cnv_w2a2"]
    f = F.auto_fold(g, 40)
    shuffled = DataflowGraph(tuple(reversed(g.nodes)), g.tensors, g.shapes)
    assert F.report_throughput(shuffled, f) == F.report_throughput(g, f)
    assert F.auto_fold(shuffled, 40) == f


def test_auto_fold_minimum_budget(built):
    g = built["cnv_w1a1"]
    f = F.auto_fold(g, 9)
    assert all(v == F.LayerFold(1, 1) for v in f.layers.values())
    with pytest.raises(ValueError):
        F.auto_fold(g, 8)


def test_auto_fold_unlimited(built):
    for g in built.values():
        f = F.auto_fold(g)
        r = F.report_throughput(g, f)
        assert F.validate_folding(g, f) == []
        assert r.bottleneck_cycles == max(d.spatial for d in F.layer_dims(g))
    assert F.report_throughput(built["cnv_w1a1"], F.auto_fold(built["cnv_w1a1"])).bottleneck_cycles == 900


def test_auto_fold_hand_trace_budget_18(built):
    # greedy steps: conv1 pe2, conv3 pe2, conv2 pe2, conv1 pe4, conv3 pe4 (16 lanes);
    # conv1 pe8 would need 4 more lanes and overshoots
    f = F.auto_fold(built["cnv_w1a1"], 18)
    assert {k: (v.pe, v.simd) for k, v in f.layers.items() if (v.pe, v.simd) != (1, 1)} == \
        {"conv1": (4, 1), "conv2": (2, 1), "conv3": (4, 1)}
    assert f.lanes == 16
    r = F.report_throughput(built["cnv_w1a1"], f)
    assert r.cycles == hand_cycles(f)
    assert (r.bottleneck, r.bottleneck_cycles) == ("conv1", 7_225_344)


def test_auto_fold_sweep_monotone(built):
    g = built["cnv_w1a1"]
    prev = 0.0
    for budget in np.unique(np.geomspace(9, 20000, 20).astype(int)):
        f = F.auto_fold(g, int(budget))
        assert F.validate_folding(g, f) == [] and f.lanes <= budget
        r = F.report_throughput(g, f)
        assert r.cycles == hand_cycles(f)
        assert r.fps_estimate >= prev
        prev = r.fps_estimate


def test_json_roundtrip(built, tmp_path):
    f = F.auto_fold(built["mobilenet_w4a4"], 100, clock_hz=2e8)
    doc = json.loads(json.dumps(f.to_json()))
    assert F.FoldingConfig.from_json(doc) == f
    est = F.report_throughput(built["mobilenet_w4a4"], f).to_json()
    assert est["schema"] == 1 and est["clock_hz"] == 2e8
