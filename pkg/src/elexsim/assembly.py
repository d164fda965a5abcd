"""Assembly of the algebraic circuit equations A x = b per switch configuration.

Rows are the KCL equations at every non-ground node followed by one element
equation per element (meters contribute two).  State variables (capacitor
voltages, inductor currents) and source values are *knowns* that land in b,
so A depends only on (circuit, switch configuration) and never on time;
that is what makes the factorization cacheable.

Element equations (branch current i flows from terminal a to b):

    source            V_a - V_b = V_s(t)          (rhs)
    capacitor         V_a - V_b = V_C             (rhs, state)
    inductor          i = i_L                     (rhs, state)
    inductor w/ rp    i - (V_a - V_b)/rp = i_L
    resistor          i - G (V_a - V_b) = 0
    diode on          V_a - V_b = Von             (rhs)
    switch on         V_a - V_b = 0
    diode/switch off  i = 0
    off, relaxed      i - G' (V_a - V_b) = -I2    (I2 from relaxation_injection)
    ammeter           V_a - V_b = 0;  i - i_fb = 0
    voltmeter         i = 0;  V_a - V_b - V_fb = 0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linsolve import LuFactors, lu_factor
from .netlist import (
    Ammeter,
    Capacitor,
    Circuit,
    Diode,
    Inductor,
    Resistor,
    Switch,
    Voltmeter,
    VSourceDC,
    VSourceSine,
)

__all__ = [
    "DEFAULT_OFF_CONDUCTANCE",
    "SwitchConfig",
    "KnownInputs",
    "LinearSystem",
    "assemble",
    "build_rhs",
    "relaxation_injection",
]

# G' = 1/R_off used by the off-state relaxation stamp (R_off = 1 MOhm)
DEFAULT_OFF_CONDUCTANCE = 1e-6


@dataclass(frozen=True)
class SwitchConfig:
    """On/off assignment for every switch and diode; the matrix-cache key."""

    bits: tuple[bool, ...]

    @classmethod
    def all_off(cls, n: int) -> "SwitchConfig":
        return cls(bits=(False,) * n)

    @classmethod
    def from_mask(cls, mask: int, n: int) -> "SwitchConfig":
        return cls(bits=tuple(bool(mask >> i & 1) for i in range(n)))

    @property
    def mask(self) -> int:
        m = 0
        for i, bit in enumerate(self.bits):
            if bit:
                m |= 1 << i
        return m

    def with_bit(self, pos: int, value: bool) -> "SwitchConfig":
        bits = list(self.bits)
        bits[pos] = value
        return SwitchConfig(bits=tuple(bits))

    def __len__(self) -> int:
        return len(self.bits)

    def describe(self, circuit: Circuit) -> str:
        parts = []
        for pos, idx in enumerate(circuit.switch_indices):
            state = "on" if self.bits[pos] else "off"
            parts.append(f"{circuit.elements[idx].name}={state}")
        return "(" + ", ".join(parts) + ")" if parts else "(no switches)"


@dataclass
class KnownInputs:
    """Known quantities entering b: states, instantaneous source values, and
    optional per-switch relaxation injection currents."""

    state_values: np.ndarray
    source_values: np.ndarray
    injections: Optional[np.ndarray] = None


@dataclass
class LinearSystem:
    """Assembled A for one switch configuration, with its factorization and
    the row bookkeeping needed to build b quickly."""

    a: np.ndarray
    row_labels: list[str]
    factors: LuFactors
    singular: bool
    config: SwitchConfig
    relaxed: bool
    # rhs stamp positions
    source_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    state_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    von_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    von_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    # per-switch relaxation stamp: (switch position, row) for off devices
    relax_rows: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.a.shape[0]


def relaxation_injection(vn1: float, vn2: float, k: int, kmax: int, gp: float) -> float:
    """Compensating current of the off-state relaxation model.

    Returns ((k-1)/(kmax-1)) * gp * (vn1 - vn2).  At k=1 the source vanishes
    (pure G' leak, which assigns floating-node voltages); at k=kmax the
    assembled switch row collapses back to the ideal off equation i = 0.
    """
    if kmax < 2:
        raise ValueError(f"kmax must be >= 2, got {kmax}")
    if not 1 <= k <= kmax:
        raise ValueError(f"k must be in [1, {kmax}], got {k}")
    if gp <= 0:
        raise ValueError(f"gp must be positive, got {gp}")
    return (k - 1) / (kmax - 1) * gp * (vn1 - vn2)


def _element_row_offsets(circuit: Circuit) -> list[int]:
    offsets = []
    row = circuit.nv
    for e in circuit.elements:
        offsets.append(row)
        row += 2 if isinstance(e, (Ammeter, Voltmeter)) else 1
    return offsets


def assemble(
    circuit: Circuit,
    config: SwitchConfig,
    relaxed: bool = False,
    off_conductance: float = DEFAULT_OFF_CONDUCTANCE,
) -> LinearSystem:
    """Assemble and factor A for one switch configuration.

    With ``relaxed`` set, off-state switches and diodes are stamped as
    ``i - G'(V_a - V_b) = rhs`` so the relaxation sweep can assign voltages
    to otherwise floating nodes; the default off stamp is the bare i = 0.
    Never raises on singularity; the flag is recorded on the result.
    """
    if len(config) != circuit.n_switches:
        raise ValueError(
            f"config has {len(config)} bits, circuit has {circuit.n_switches} switches"
        )
    n = circuit.n_unknowns
    a = np.zeros((n, n))
    labels = [f"kcl({name})" for name in circuit.node_names[1:]]

    # KCL: +i leaves through terminal a, enters through terminal b
    for idx, e in enumerate(circuit.elements):
        ci = circuit.current_col[idx]
        if e.a > 0:
            a[e.a - 1, ci] += 1.0
        if e.b > 0:
            a[e.b - 1, ci] -= 1.0

    switch_pos = {idx: pos for pos, idx in enumerate(circuit.switch_indices)}
    offsets = _element_row_offsets(circuit)

    source_rows: list[int] = []
    state_rows: list[int] = []
    von_rows: list[int] = []
    von_values: list[float] = []
    relax_rows: list[tuple[int, int]] = []

    def stamp_vdiff(row: int, e, coeff: float = 1.0) -> None:
        if e.a > 0:
            a[row, e.a - 1] += coeff
        if e.b > 0:
            a[row, e.b - 1] -= coeff

    for idx, e in enumerate(circuit.elements):
        row = offsets[idx]
        ci = circuit.current_col[idx]
        if isinstance(e, (VSourceDC, VSourceSine)):
            stamp_vdiff(row, e)
            source_rows.append(row)
            labels.append(f"{e.name}: V_a - V_b = Vs")
        elif isinstance(e, Resistor):
            a[row, ci] = 1.0
            stamp_vdiff(row, e, -1.0 / e.r)
            labels.append(f"{e.name}: i - G dV = 0")
        elif isinstance(e, Capacitor):
            stamp_vdiff(row, e)
            state_rows.append(row)
            labels.append(f"{e.name}: V_a - V_b = Vc")
        elif isinstance(e, Inductor):
            a[row, ci] = 1.0
            if e.rp is not None:
                stamp_vdiff(row, e, -1.0 / e.rp)
            state_rows.append(row)
            labels.append(f"{e.name}: i = iL")
        elif isinstance(e, (Diode, Switch)):
            on = config.bits[switch_pos[idx]]
            if on:
                stamp_vdiff(row, e)
                if isinstance(e, Diode) and e.von != 0.0:
                    von_rows.append(row)
                    von_values.append(e.von)
                labels.append(f"{e.name}: on")
            elif relaxed:
                a[row, ci] = 1.0
                stamp_vdiff(row, e, -off_conductance)
                relax_rows.append((switch_pos[idx], row))
                labels.append(f"{e.name}: off (relaxed)")
            else:
                a[row, ci] = 1.0
                labels.append(f"{e.name}: off")
        elif isinstance(e, Ammeter):
            stamp_vdiff(row, e)
            labels.append(f"{e.name}: V_a - V_b = 0")
            a[row + 1, ci] = 1.0
            a[row + 1, circuit.fb_col[idx]] = -1.0
            labels.append(f"{e.name}: i - {e.out} = 0")
        elif isinstance(e, Voltmeter):
            a[row, ci] = 1.0
            labels.append(f"{e.name}: i = 0")
            stamp_vdiff(row + 1, e)
            a[row + 1, circuit.fb_col[idx]] = -1.0
            labels.append(f"{e.name}: V_a - V_b - {e.out} = 0")
        else:
            raise TypeError(f"unhandled element {type(e).__name__}")

    factors = lu_factor(a)
    return LinearSystem(
        a=a,
        row_labels=labels,
        factors=factors,
        singular=factors.singular,
        config=config,
        relaxed=relaxed,
        source_rows=np.array(source_rows, dtype=int),
        state_rows=np.array(state_rows, dtype=int),
        von_rows=np.array(von_rows, dtype=int),
        von_values=np.array(von_values),
        relax_rows=relax_rows,
    )


def build_rhs(circuit: Circuit, system: LinearSystem, knowns: KnownInputs) -> np.ndarray:
    """Build b for a previously assembled system.

    Entries hold the instantaneous source values, the state values, any
    nonzero diode on-voltages, and (in relaxed mode) the negated relaxation
    injection currents; every other entry is zero.
    """
    b = np.zeros(system.n)
    if len(system.source_rows):
        b[system.source_rows] = knowns.source_values
    if len(system.state_rows):
        b[system.state_rows] = knowns.state_values
    if len(system.von_rows):
        b[system.von_rows] = system.von_values
    if system.relax_rows and knowns.injections is not None:
        for pos, row in system.relax_rows:
            b[row] = -knowns.injections[pos]
    return b
