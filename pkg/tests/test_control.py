import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elexsim.control import (
    Block,
    ControlGraph,
    ControlGraphError,
    build_graph,
    carrier_value,
    decompose_filter,
    evaluate_passes,
    integrator_stage_update,
    parse_control_section,
)
from elexsim.engine import FEHLBERG45

# lead/lag compensator constants used by the voltage-mode example
KC, WZ, WP = 4.551e3, 6.492e3, 6.081e5


def _lines(text):
    return [(i + 1, line) for i, line in enumerate(text.strip().splitlines())]


# --- filter decomposition -----------------------------------------------------


def test_decompose_filter_constants():
    d = decompose_filter(KC, WZ, WP)
    assert d.k == pytest.approx(1 - WP / WZ)
    assert d.k == pytest.approx(-92.66922, rel=1e-6)
    assert d.feedthrough == pytest.approx(KC * WP / WZ)
    assert d.pole == WP


def test_decompose_degenerate_is_pure_gain():
    d = decompose_filter(5.0, 1e3, 1e3)
    assert d.k == 0.0
    w = np.logspace(0, 6, 10)
    assert np.allclose(d.response(w), 5.0)


def test_decompose_dc_gain():
    d = decompose_filter(KC, WZ, WP)
    assert d.response(0.0) == pytest.approx(KC)


def test_decompose_rejects_bad_corners():
    with pytest.raises(ValueError):
        decompose_filter(1.0, 0.0, 1e3)
    with pytest.raises(ValueError):
        decompose_filter(1.0, 1e3, -1.0)


def test_decomposition_matches_transfer_function_randomly():
    # reference is the factored form Kc (1 + jw/wz) / (1 + jw/wp)
    rng = np.random.default_rng(5)
    w = np.logspace(1, 7, 20)
    for _ in range(100):
        kc = 10.0 ** rng.uniform(-2, 4)
        wz = 10.0 ** rng.uniform(1, 7)
        wp = 10.0 ** rng.uniform(1, 7)
        ref = kc * (1 + 1j * w / wz) / (1 + 1j * w / wp)
        got = decompose_filter(kc, wz, wp).response(w)
        assert np.max(np.abs(got - ref) / np.abs(ref)) < 1e-10


# --- carriers -------------------------------------------------------------------


def test_sawtooth_midpoint():
    # half way through the 2.5 us period of a 400 kHz ramp
    assert carrier_value("saw", 0, 1, 4e5, 1.25e-6) == pytest.approx(0.5)


def test_triangle_extremes():
    assert carrier_value("tri", -1, 1, 2e4, 0.0) == -1.0
    assert carrier_value("tri", -1, 1, 2e4, 25e-6) == pytest.approx(1.0)


@given(st.integers(0, 1000), st.floats(0, 1))
@settings(max_examples=200)
def test_carrier_periodicity(n, frac):
    f = 20e3
    t = (n + frac) / f
    for kind in ("saw", "tri"):
        a = carrier_value(kind, -1, 1, f, t)
        b = carrier_value(kind, -1, 1, f, t + 1 / f)
        assert abs(a - b) < 1e-12 or (kind == "saw" and abs(abs(a - b) - 2) < 1e-9)


def test_carrier_rejects_bad_frequency():
    with pytest.raises(ValueError):
        carrier_value("saw", 0, 1, 0.0, 1.0)


# --- pass evaluation ------------------------------------------------------------


def _vsc_chain():
    kp = 125.66
    v0 = 200.0
    return build_graph([
        Block("iref", "const", params={"v": 2.0}),
        Block("x1", "sum", inputs=("iref", "ifb"), signs=(1.0, -1.0)),
        Block("x2", "gain", inputs=("x1",), params={"k": kp}),
        Block("x3", "sum", inputs=("x2", "vfb"), signs=(1.0, -1.0)),
        Block("x4", "gain", inputs=("x3",), params={"k": 1 / (2 * v0)}),
    ]), kp, v0


def test_current_controller_chain_values():
    graph, kp, v0 = _vsc_chain()
    s = evaluate_passes(graph, 0.0, {"ifb": 1.5, "vfb": 3.0},
                        graph.initial_states())
    x1 = s[graph.signal_id("x1")]
    x2 = s[graph.signal_id("x2")]
    x3 = s[graph.signal_id("x3")]
    x4 = s[graph.signal_id("x4")]
    assert x1 == pytest.approx(0.5)
    assert x2 == pytest.approx(kp * 0.5)
    assert x3 == pytest.approx(kp * 0.5 - 3.0)
    assert x4 == pytest.approx((kp * 0.5 - 3.0) / (2 * v0))


def test_comparator_tie_gives_zero():
    graph = build_graph([
        Block("a", "const", params={"v": 1.0}),
        Block("b", "const", params={"v": 1.0}),
        Block("g", "comp", inputs=("a", "b"), out_b="gb"),
    ])
    s = evaluate_passes(graph, 0.0, {}, graph.initial_states())
    assert s[graph.signal_id("g")] == 0.0
    assert s[graph.signal_id("gb")] == 1.0


def test_zero_error_settles_filter_to_zero():
    graph = build_graph([
        Block("vref", "const", params={"v": 12.0}),
        Block("x1", "sum", inputs=("vref", "vfb"), signs=(1.0, -1.0)),
        Block("x8", "filt", inputs=("x1",), params={"kc": KC, "wz": WZ, "wp": WP}),
    ])
    s = evaluate_passes(graph, 0.0, {"vfb": 12.0}, graph.initial_states())
    assert s[graph.signal_id("x1")] == 0.0
    assert s[graph.signal_id("x8")] == 0.0
    # and the filter state has no drive either
    derivs = graph.state_derivatives(s, graph.initial_states())
    assert derivs[0] == 0.0


def test_algebraic_loop_detected():
    with pytest.raises(ControlGraphError, match="loop"):
        build_graph([
            Block("a", "gain", inputs=("b",), params={"k": 1.0}),
            Block("b", "gain", inputs=("a",), params={"k": 1.0}),
        ])


def test_every_block_fires_exactly_once():
    graph, _, _ = _vsc_chain()
    fired = [b.name for p in graph.passes for b in p]
    pass_blocks = {b.name for b in graph.blocks if b.kind not in ("const", "int")}
    assert sorted(fired) == sorted(pass_blocks)
    assert len(graph.passes) <= len(graph.blocks)


def test_integrator_output_is_its_state():
    graph = build_graph([
        Block("u", "const", params={"v": 3.0}),
        Block("x", "int", inputs=("u",), params={"gain": 2.0}),
    ])
    states = np.array([0.7])
    s = evaluate_passes(graph, 0.0, {}, states)
    assert s[graph.signal_id("x")] == 0.7
    assert graph.state_derivatives(s, states)[0] == pytest.approx(6.0)


# --- stage updates --------------------------------------------------------------


def test_stage_update_clamps():
    v = integrator_stage_update(0.99, [10.0], [1.0], out_min=0.0, out_max=1.0)
    assert v == 1.0


def test_stage_update_zero_derivative():
    assert integrator_stage_update(0.5, [0.0, 0.0], [0.3, 0.7]) == 0.5


def test_pure_integrator_advances_by_h_over_full_step():
    # dx/dt = 1: the h-scaled stage derivatives are all h, and the 5th-order
    # weights sum to one, so the full-step update is exactly h
    h = 0.37
    ks = [h] * 6
    v = integrator_stage_update(1.0, ks, FEHLBERG45.gamma5_f)
    assert v == pytest.approx(1.0 + h, rel=1e-15)


# --- netlist section parsing -----------------------------------------------------


def test_parse_control_section_buck_style():
    graph = parse_control_section(_lines("""
vref const v=12
x1 sum vref -vfb
x8 filt x1 kc=4.551k wz=6.492k wp=608.1k
x9 int x8 min=0 max=1
saw saw min=0 max=1 f=400k
g comp x9 saw
"""))
    assert graph.n_states == 2
    assert [b.name for b in graph.state_blocks] == ["x8", "x9"]
    assert graph.external_inputs == ["vfb"]
    lo, hi = graph.state_limits()
    assert lo[1] == 0.0 and hi[1] == 1.0


def test_parse_control_rejects_unknown_kind():
    with pytest.raises(Exception, match="unknown control block kind"):
        parse_control_section(_lines("x pid a b c kp=1"))


def test_parse_control_rejects_bad_integrator_bounds():
    with pytest.raises(Exception, match="min < max"):
        parse_control_section(_lines("u const v=1\nx int u min=1 max=0"))


def test_duplicate_outputs_rejected():
    with pytest.raises(ControlGraphError, match="duplicate"):
        build_graph([
            Block("a", "const", params={"v": 1.0}),
            Block("a2", "const", params={"v": 1.0}),
            Block("g", "comp", inputs=("a", "a2"), out_b="a"),
        ])


def test_gates_are_binary_over_time():
    graph = parse_control_section(_lines("""
duty const v=0.3
saw saw min=0 max=1 f=25k
g comp duty saw
"""))
    for t in np.linspace(0, 1e-3, 500):
        s = evaluate_passes(graph, float(t), {}, graph.initial_states())
        assert s[graph.signal_id("g")] in (0.0, 1.0)
