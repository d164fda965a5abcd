"""Built-in example systems used by the tests, the demos, and the CLI.

Each example carries its netlist text (electrical elements plus the
``[control]`` section where applicable), a recommended solver config, and a
``meta`` dict flagging which parameter values are placeholders chosen here
rather than quoted circuit data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from .control import ControlGraph, parse_control_section
from .engine import SolverConfig
from .netlist import Circuit, parse_netlist, split_sections

__all__ = ["NamedExample", "EXAMPLE_NAMES", "example", "netlist_text"]


@dataclass
class NamedExample:
    name: str
    circuit: Circuit
    controls: Optional[ControlGraph]
    cfg: SolverConfig
    method: str
    netlist: str
    meta: dict = field(default_factory=dict)


# --- half-wave rectifier ----------------------------------------------------
# 10 V / 50 Hz source, ideal diode, 1 mF with 10 mOhm series resistance,
# 200 Ohm load; charging time constant ~ 10 us, discharge ~ 0.2 s.

_HWRECT = """\
# half-wave rectifier: vs -- diode -- (C + r1 || R)
vs vsin 1 0 vm=10 f=50
d1 d 1 2
c1 c 2 0 c=1m r1=10m
rl r 2 0 r=200
"""


def _hwrect() -> NamedExample:
    return NamedExample(
        name="hwrect",
        circuit=parse_netlist(_HWRECT),
        controls=None,
        cfg=SolverConfig(t_end=60e-3, h_max=0.5e-3, h_min=1e-9, lte_tol=1e-6),
        method="rkf",
        netlist=_HWRECT,
        meta={"tau_charge": 10e-6, "tau_discharge": 0.2},
    )


# --- two controlled switches in series ---------------------------------------
# 10 V dc across two gated switches; the middle node floats when both are
# off and needs the relaxation sweep to split the voltage.  The gate
# timeline (on/off, off/on, off/off over three equal thirds) is built from
# a slow ramp and two comparators.

_SERIES_SWITCHES = """\
v0 vdc A 0 v=10
s1 sw A B gate=g1
s2 sw B 0 gate=g2
vmb vm B 0 out=vb

[control]
ramp saw min=0 max=1 f=250
th1 const v=0.25
th2 const v=0.5
g1 comp th1 ramp
c2 comp th2 ramp
g2 sum c2 -g1
"""


def _series_switches() -> NamedExample:
    circuit, controls = _load(_SERIES_SWITCHES)
    return NamedExample(
        name="series_switches",
        circuit=circuit,
        controls=controls,
        cfg=SolverConfig(t_end=3e-3, h_init=10e-6, relaxation=True,
                         relaxation_kmax=2),
        method="fe",
        netlist=_SERIES_SWITCHES,
        meta={"expected_plateaus": (10.0, 0.0, 5.0),
              "phase_bounds": (1e-3, 2e-3)},
    )


# --- boost converter, discontinuous conduction --------------------------------
# Parameter values are placeholders chosen to give a robust discontinuous
# steady state (the per-cycle S-on / D-on / both-off sequence); flagged in
# meta["non_paper"].  The inductor carries rp so the both-off interval stays
# solvable; the capacitor carries a small ESR so commutation trials stay
# solvable.

_BOOST = """\
vin vdc 1 0 v=12
ln l 1 2 l=100u rp=1meg
s1 sw 2 0 gate=g
d1 d 2 3
co c 3 0 c=100u r1=10m
rl r 3 0 r=100

[control]
duty const v=0.3
saw saw min=0 max=1 f=25k
g comp duty saw
"""


def _boost() -> NamedExample:
    circuit, controls = _load(_BOOST)
    return NamedExample(
        name="boost",
        circuit=circuit,
        controls=controls,
        cfg=SolverConfig(t_end=60e-3, h_max=2e-6, h_min=1e-12, lte_tol=1e-5,
                         event_dt=1e-12),
        method="rkf",
        netlist=_BOOST,
        meta={"non_paper": ["vin", "ln", "co", "rl", "duty", "saw.f"],
              "switching_period": 40e-6},
    )


# --- current-controlled two-level voltage source converter --------------------
# Reduced to a single-phase full bridge feeding a 50 Hz source through a
# series inductor.  The controller tracks I_Lref = Im sin(wt + phi) with a
# proportional gain Kp = w_tri * L / 10 and feeds the measured source
# voltage forward; unipolar PWM against a symmetric 20 kHz triangle.
# The dc link (2*V0 = 400 V), ac magnitude and inductance are placeholders.

_V0 = 200.0
_L_VSC = 10e-3
_KP_VSC = 2 * math.pi * 20e3 * _L_VSC / 10
_IM_VSC = 2.5 * math.sqrt(2)

_VSC_CC = f"""\
vdc vdc P 0 v={2 * _V0}
s1 sw P A gate=g1
s2 sw A 0 gate=g2
s3 sw P B gate=g3
s4 sw B 0 gate=g4
ama am A M out=ifb
lf l M Q l={_L_VSC}
vg vsin Q B vm=200 f=50
vmg vm B Q out=vfb

[control]
iref sine im={_IM_VSC} f=50 phase={-math.pi / 6}
tri tri min=-1 max=1 f=20k
x1 sum iref -ifb
x2 gain x1 k={_KP_VSC}
x3 sum x2 -vfb
x4 gain x3 k={1 / (2 * _V0)}
xm4 gain x4 k=-1
g1 comp x4 tri outb=g2
g3 comp xm4 tri outb=g4
"""


def _vsc_cc() -> NamedExample:
    circuit, controls = _load(_VSC_CC)
    return NamedExample(
        name="vsc_cc",
        circuit=circuit,
        controls=controls,
        cfg=SolverConfig(t_end=40e-3, h_max=5e-6, h_min=1e-12, lte_tol=1e-5),
        method="rkf",
        netlist=_VSC_CC,
        meta={"non_paper": ["vdc", "lf", "vg"], "i_ref_amplitude": _IM_VSC,
              "v0": _V0},
    )


# --- voltage-controlled buck converter ----------------------------------------
# 25 V in, L = 24 uH, C = 500 uF with 0.08 Ohm ESR, 4 Ohm load; the
# compensator is the lead/lag Kc (1+s/wz)/(1+s/wp) followed by a [0,1]
# limited integrator, compared against a 0..1 sawtooth at 400 kHz.  The
# reference steps 12 -> 15 V at 10 ms (built from a slow ramp comparator).
# rp on L is a solver aid (commutation), not circuit data.

_BUCK_KC = 4.551e3
_BUCK_WZ = 6.492e3
_BUCK_WP = 6.081e5

_BUCK_VC = f"""\
vin vdc P 0 v=25
s1 sw P X gate=g
d1 d 0 X
lf l X OUT l=24u rp=1meg
co c OUT 0 c=500u r1=0.08
rl r OUT 0 r=4
vmo vm OUT 0 out=vfb

[control]
base const v=12
stepramp saw min=0 max=1 f=25
stepth const v=0.25
stepc comp stepramp stepth
stepv gain stepc k=3
vref sum base stepv
x1 sum vref -vfb
x8 filt x1 kc={_BUCK_KC} wz={_BUCK_WZ} wp={_BUCK_WP}
x9 int x8 min=0 max=1
saw saw min=0 max=1 f=400k
g comp x9 saw
"""


def _buck_vc() -> NamedExample:
    circuit, controls = _load(_BUCK_VC)
    return NamedExample(
        name="buck_vc",
        circuit=circuit,
        controls=controls,
        cfg=SolverConfig(t_end=20e-3, h_max=1e-6, h_min=1e-10, lte_tol=1e-4),
        method="rkf",
        netlist=_BUCK_VC,
        meta={"non_paper": ["lf.rp"], "t_step": 10e-3, "v_ref": (12.0, 15.0),
              "f_sw": 400e3},
    )


def _load(text: str):
    circuit = parse_netlist(text)
    _, control_lines = split_sections(text)
    controls = parse_control_section(control_lines) if control_lines else None
    return circuit, controls


_BUILDERS = {
    "hwrect": _hwrect,
    "series_switches": _series_switches,
    "boost": _boost,
    "vsc_cc": _vsc_cc,
    "buck_vc": _buck_vc,
}

EXAMPLE_NAMES = tuple(_BUILDERS)


def example(name: str) -> NamedExample:
    """Fully parameterized example system by name."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise KeyError(
            f"unknown example {name!r}; choose from {', '.join(EXAMPLE_NAMES)}"
        ) from None
    return builder()


def netlist_text(name: str) -> str:
    return example(name).netlist
