import numpy as np
import pytest
from hypothesis import given, strategies as st

from elexsim.assembly import (
    KnownInputs,
    SwitchConfig,
    assemble,
    build_rhs,
    relaxation_injection,
)
from elexsim.linsolve import lu_solve
from elexsim.netlist import parse_netlist

RECTIFIER = """\
vs vsin 1 0 vm=10 f=50
d1 d 1 2
c1 c 2 0 c=1m r1=10m
rl r 2 0 r=200
"""

TWO_SWITCHES = """\
v0 vdc A 0 v=10
s1 sw A B gate=g1
s2 sw B 0 gate=g2
"""

BOOST = """\
vin vdc 1 0 v=12
ln l 1 2 l=100u rp=1meg
s1 sw 2 0 gate=g
d1 d 2 3
co c 3 0 c=100u r1=10m
rl r 3 0 r=100
"""


@pytest.fixture
def rectifier():
    return parse_netlist(RECTIFIER)


def test_rectifier_diode_on_matrix(rectifier):
    # hand-assembled system for the rectifier with the diode conducting:
    # KCL at nodes 1..3, then source, diode, capacitor, series R, load R rows
    # over x = (V1, V2, V3, i_vs, i_d, i_c, i_r1, i_rl)
    sys_on = assemble(rectifier, SwitchConfig((True,)))
    g1 = 1.0 / 10e-3
    g = 1.0 / 200.0
    expected = np.array([
        [0, 0, 0, 1, 1, 0, 0, 0],
        [0, 0, 0, 0, -1, 1, 0, 1],
        [0, 0, 0, 0, 0, -1, 1, 0],
        [1, 0, 0, 0, 0, 0, 0, 0],
        [1, -1, 0, 0, 0, 0, 0, 0],
        [0, 1, -1, 0, 0, 0, 0, 0],
        [0, 0, -g1, 0, 0, 0, 1, 0],
        [0, -g, 0, 0, 0, 0, 0, 1],
    ], dtype=float)
    assert np.array_equal(sys_on.a, expected)
    assert not sys_on.singular


def test_both_off_switch_pair_is_singular():
    c = parse_netlist(TWO_SWITCHES)
    sys_off = assemble(c, SwitchConfig((False, False)))
    assert sys_off.singular  # the middle node floats: no row touches V_B


def test_boost_both_off_with_rp_not_singular():
    c = parse_netlist(BOOST)
    sys_off = assemble(c, SwitchConfig((False, False)))
    assert not sys_off.singular


def test_boost_both_off_without_rp_singular():
    c = parse_netlist(BOOST.replace(" rp=1meg", ""))
    assert assemble(c, SwitchConfig((False, False))).singular


def test_assembly_is_bit_identical(rectifier):
    a1 = assemble(rectifier, SwitchConfig((True,))).a
    a2 = assemble(rectifier, SwitchConfig((True,))).a
    assert np.array_equal(a1, a2)


def test_rhs_zero_when_knowns_zero(rectifier):
    sys_on = assemble(rectifier, SwitchConfig((True,)))
    b = build_rhs(rectifier, sys_on, KnownInputs(np.zeros(1), np.zeros(1)))
    assert np.array_equal(b, np.zeros(8))


def test_rhs_places_source_and_state(rectifier):
    sys_on = assemble(rectifier, SwitchConfig((True,)))
    knowns = KnownInputs(np.array([4.0]), np.array([10.0]))
    b = build_rhs(rectifier, sys_on, knowns)
    assert b[3] == 10.0  # source row
    assert b[5] == 4.0   # capacitor row
    assert np.count_nonzero(b) == 2
    # cross-check: the solution satisfies the system it came from
    x = lu_solve(sys_on.factors, b)
    assert np.max(np.abs(sys_on.a @ x - b)) <= 1e-9 * max(1.0, np.max(np.abs(b)))


def test_rhs_nonzero_diode_von():
    c = parse_netlist("v1 vdc 1 0 v=5\nd1 d 1 2 von=0.7\nr1 r 2 0 r=10\n")
    sys_on = assemble(c, SwitchConfig((True,)))
    b = build_rhs(c, sys_on, KnownInputs(np.zeros(0), np.array([5.0])))
    row = list(sys_on.row_labels).index("d1: on")
    assert b[row] == 0.7


def test_rhs_relaxation_injection_rows():
    c = parse_netlist(TWO_SWITCHES)
    g = 1e-6
    sys_rel = assemble(c, SwitchConfig((False, False)), relaxed=True, off_conductance=g)
    assert not sys_rel.singular
    inj = np.array([
        relaxation_injection(10.0, 5.0, 2, 2, g),
        relaxation_injection(5.0, 0.0, 2, 2, g),
    ])
    knowns = KnownInputs(np.zeros(0), np.array([10.0]), injections=inj)
    b = build_rhs(c, sys_rel, knowns)
    rows = {pos: row for pos, row in sys_rel.relax_rows}
    assert b[rows[0]] == -inj[0]
    assert b[rows[1]] == -inj[1]


def test_kcl_residual_after_solve(rectifier):
    rng = np.random.default_rng(1)
    for config in (SwitchConfig((True,)), SwitchConfig((False,))):
        system = assemble(rectifier, config)
        for _ in range(20):
            knowns = KnownInputs(rng.normal(size=1) * 10, rng.normal(size=1) * 10)
            x = lu_solve(system.factors, build_rhs(rectifier, system, knowns))
            # sum of branch currents at every non-ground node
            for node in range(1, rectifier.n_nodes):
                total = 0.0
                for idx, e in enumerate(rectifier.elements):
                    if e.a == node:
                        total += x[rectifier.current_col[idx]]
                    if e.b == node:
                        total -= x[rectifier.current_col[idx]]
                assert abs(total) <= 1e-9


@given(
    st.floats(-100, 100), st.floats(-100, 100),
    st.floats(-100, 100), st.floats(-100, 100),
    st.floats(-10, 10), st.floats(-10, 10),
)
def test_rhs_is_affine_in_knowns(s1, s2, v1, v2, alpha, beta):
    c = parse_netlist(RECTIFIER)
    system = assemble(c, SwitchConfig((True,)))
    k1 = KnownInputs(np.array([s1]), np.array([v1]))
    k2 = KnownInputs(np.array([s2]), np.array([v2]))
    mixed = KnownInputs(
        alpha * k1.state_values + beta * k2.state_values,
        alpha * k1.source_values + beta * k2.source_values,
    )
    b_mixed = build_rhs(c, system, mixed)
    b_lin = alpha * build_rhs(c, system, k1) + beta * build_rhs(c, system, k2)
    assert np.allclose(b_mixed, b_lin, rtol=0, atol=1e-9 * (1 + np.max(np.abs(b_lin))))


def test_relaxation_injection_values():
    # k=1 removes the compensating source entirely
    assert relaxation_injection(10.0, 5.0, 1, 2, 1e-6) == 0.0
    # k=kmax reproduces the ideal off equation: i - G'*5 = -5e-6 => i = 0
    assert relaxation_injection(10.0, 5.0, 2, 2, 1e-6) == pytest.approx(5e-6)
    # zero voltage difference injects nothing at any k
    assert relaxation_injection(7.0, 7.0, 2, 2, 1e-6) == 0.0


def test_relaxation_injection_parameter_errors():
    with pytest.raises(ValueError):
        relaxation_injection(1.0, 0.0, 1, 1, 1e-6)
    with pytest.raises(ValueError):
        relaxation_injection(1.0, 0.0, 3, 2, 1e-6)
    with pytest.raises(ValueError):
        relaxation_injection(1.0, 0.0, 0, 2, 1e-6)
    with pytest.raises(ValueError):
        relaxation_injection(1.0, 0.0, 1, 2, -1e-6)


@given(st.integers(2, 20), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_relaxation_injection_scales_linearly_in_k(kmax, va, vb):
    g = 1e-6
    full = g * (va - vb)
    for k in range(1, kmax + 1):
        expected = (k - 1) / (kmax - 1) * full
        assert relaxation_injection(va, vb, k, kmax, g) == pytest.approx(expected, abs=1e-18)


def test_config_mismatch_rejected(rectifier):
    with pytest.raises(ValueError, match="bits"):
        assemble(rectifier, SwitchConfig((True, False)))
