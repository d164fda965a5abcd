"""Time-stepping core: switch-consistent solves with a dynamic matrix cache,
fixed-step forward-Euler and adaptive Runge-Kutta-Fehlberg 4(5) integration.

The scheme: state variables (capacitor voltages, inductor currents) advance
explicitly; at every evaluation point the algebraic circuit equations are
re-solved with the states treated as knowns, re-using the cached LU factors
of the switch configuration in effect.  Because A is time-independent, a
configuration is assembled and factored at most once per run.

Per integration stage the order is: advance states to the stage value,
evaluate sources at the stage time, solve the electrical equations (letting
diode states settle self-consistently), then update the control block, whose
gate outputs take effect from the next stage on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .assembly import (
    DEFAULT_OFF_CONDUCTANCE,
    KnownInputs,
    LinearSystem,
    SwitchConfig,
    assemble,
    build_rhs,
    relaxation_injection,
)
from .control import ControlGraph, evaluate_passes
from .linsolve import lu_solve
from .netlist import Circuit, Diode, Inductor, Switch

__all__ = [
    "SolverError",
    "SingularConfigurationError",
    "ConsistencyError",
    "RelaxationError",
    "RelaxationOptions",
    "SolverConfig",
    "MatrixCache",
    "StateSnapshot",
    "RkfTableau",
    "FEHLBERG45",
    "RunStats",
    "RunWarning",
    "SimulationResult",
    "consistent_solve",
    "relaxed_solve",
    "state_derivatives",
    "fe_step",
    "rkf_step",
    "adapt_step",
    "run",
]

# switch-consistency tolerances: on-diode current / off-diode forward voltage
CURRENT_TOL = 1e-9
VOLTAGE_TOL = 1e-9


class SolverError(RuntimeError):
    """Base class for simulation failures."""


class SingularConfigurationError(SolverError):
    """A switch configuration produced a singular circuit matrix and no
    solvable consistent alternative exists (and relaxation is disabled)."""


class ConsistencyError(SolverError):
    """The switch-consistency loop failed to settle."""


class RelaxationError(SolverError):
    """The off-state relaxation sweep failed to converge."""


@dataclass(frozen=True)
class RelaxationOptions:
    """Knobs of the off-state relaxation sweep (enabled by passing this)."""

    kmax: int = 2
    iters_max: int = 10
    off_conductance: float = DEFAULT_OFF_CONDUCTANCE

    def __post_init__(self):
        if self.kmax < 2:
            raise ValueError("relaxation kmax must be >= 2")


@dataclass
class SolverConfig:
    """Run parameters.

    ``h_init`` doubles as the fixed step for the FE method.  ``lte_tol`` is
    an absolute per-state tolerance on the |5th - 4th| order difference.
    ``event_dt`` is the target bracket width for diode turn-off bisection.
    Relaxation is opt-in: with ``relaxation`` False a singular configuration
    with no consistent alternative is an error.
    """

    t_end: float
    h_init: Optional[float] = None
    h_min: float = 1e-12
    h_max: Optional[float] = None
    lte_tol: float = 1e-6
    event_dt: float = 1e-12
    relaxation: bool = False
    relaxation_g: float = DEFAULT_OFF_CONDUCTANCE
    relaxation_kmax: int = 2
    relaxation_iters_max: int = 10
    consistency_iters_max: Optional[int] = None
    loop_voltage_warn: float = 1e3
    crossover_planner: bool = True
    turnoff_substitution: bool = True
    # safety budget: stop (with a warning) after this many accepted points
    max_steps: Optional[int] = None

    def resolved(self, method: str) -> "SolverConfig":
        """Fill derived defaults and validate for the given method."""
        cfg = replace(self)
        if cfg.t_end < 0:
            raise ValueError("t_end must be >= 0")
        if method == "fe":
            if cfg.h_init is None:
                raise ValueError("the FE method requires an explicit step (h_init)")
            if cfg.h_max is None:
                cfg.h_max = cfg.h_init
        elif method == "rkf":
            if cfg.h_max is None:
                cfg.h_max = cfg.t_end / 50 if cfg.t_end > 0 else 1.0
            if cfg.h_init is None:
                cfg.h_init = min(cfg.h_max, max(cfg.h_min, cfg.t_end / 1000 or cfg.h_max))
        else:
            raise ValueError(f"unknown method {method!r} (expected 'fe' or 'rkf')")
        if not (0 < cfg.h_min <= cfg.h_init <= cfg.h_max):
            raise ValueError(
                f"need 0 < h_min <= h_init <= h_max, got "
                f"{cfg.h_min}, {cfg.h_init}, {cfg.h_max}"
            )
        if cfg.lte_tol <= 0:
            raise ValueError("lte_tol must be positive")
        return cfg

    def relaxation_options(self) -> Optional[RelaxationOptions]:
        if not self.relaxation:
            return None
        return RelaxationOptions(
            kmax=self.relaxation_kmax,
            iters_max=self.relaxation_iters_max,
            off_conductance=self.relaxation_g,
        )


@dataclass
class RunStats:
    accepted: int = 0
    rejected: int = 0
    assemblies: int = 0
    solves: int = 0
    relaxation_solves: int = 0
    cache_entries: int = 0
    bisection_iters: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class MatrixCache:
    """Per-configuration linear systems, assembled on first use and kept for
    the lifetime of the run (both ideal and relaxed variants)."""

    def __init__(self, off_conductance: float = DEFAULT_OFF_CONDUCTANCE):
        self.off_conductance = off_conductance
        self._store: dict[tuple, LinearSystem] = {}
        self.assemblies = 0

    def get(self, circuit: Circuit, config: SwitchConfig, relaxed: bool = False) -> LinearSystem:
        key = (config.bits, relaxed)
        system = self._store.get(key)
        if system is None:
            system = assemble(circuit, config, relaxed=relaxed,
                              off_conductance=self.off_conductance)
            self._store[key] = system
            self.assemblies += 1
        return system

    def __len__(self) -> int:
        return len(self._store)

    def distinct_configs(self) -> set[tuple]:
        return {bits for bits, _ in self._store}


@dataclass
class StateSnapshot:
    """One accepted (or trial) simulation point: time, ODE states, the full
    algebraic solution, the configuration it was solved with, and the
    control-block signal table and states."""

    t: float
    states: np.ndarray
    x: np.ndarray
    switch_config: SwitchConfig
    control: np.ndarray
    control_states: np.ndarray


@dataclass
class RkfTableau:
    """Embedded 4(5) pair coefficients; beta[m] is the row for stage m+1."""

    alpha: tuple
    beta: tuple
    gamma4: tuple
    gamma5: tuple

    def __post_init__(self):
        self.alpha_f = np.array([float(a) for a in self.alpha])
        self.beta_f = [np.array([float(b) for b in row]) for row in self.beta]
        self.gamma4_f = np.array([float(g) for g in self.gamma4])
        self.gamma5_f = np.array([float(g) for g in self.gamma5])
        self.stages = len(self.alpha)


def _fr(a, b):
    return Fraction(a, b)


FEHLBERG45 = RkfTableau(
    alpha=(_fr(0, 1), _fr(1, 4), _fr(3, 8), _fr(12, 13), _fr(1, 1), _fr(1, 2)),
    beta=(
        (),
        (_fr(1, 4),),
        (_fr(3, 32), _fr(9, 32)),
        (_fr(1932, 2197), _fr(-7200, 2197), _fr(7296, 2197)),
        (_fr(439, 216), _fr(-8, 1), _fr(3680, 513), _fr(-845, 4104)),
        (_fr(-8, 27), _fr(2, 1), _fr(-3544, 2565), _fr(1859, 4104), _fr(-11, 40)),
    ),
    gamma4=(_fr(25, 216), _fr(0, 1), _fr(1408, 2565), _fr(2197, 4104), _fr(-1, 5), _fr(0, 1)),
    gamma5=(_fr(16, 135), _fr(0, 1), _fr(6656, 12825), _fr(28561, 56430), _fr(-9, 50), _fr(2, 55)),
)


# ---------------------------------------------------------------------------
# algebraic solves with switch consistency
# ---------------------------------------------------------------------------


def _solve_system(system: LinearSystem, circuit: Circuit, knowns: KnownInputs,
                  stats: Optional[RunStats]) -> np.ndarray:
    b = build_rhs(circuit, system, knowns)
    if stats is not None:
        stats.solves += 1
    return lu_solve(system.factors, b)


def _node_voltage(x: np.ndarray, node: int) -> float:
    return x[node - 1] if node > 0 else 0.0


def _inconsistent_diodes(circuit: Circuit, config: SwitchConfig, x: np.ndarray) -> list[int]:
    """Positions (in the switch vector) of diodes whose state the solution
    does not justify: on with current < 0, or off with forward voltage > Von."""
    flips = []
    for pos, idx in enumerate(circuit.switch_indices):
        e = circuit.elements[idx]
        if not isinstance(e, Diode):
            continue
        if config.bits[pos]:
            if x[circuit.current_col[idx]] < -CURRENT_TOL:
                flips.append(pos)
        else:
            fwd = _node_voltage(x, e.a) - _node_voltage(x, e.b)
            if fwd > e.von + VOLTAGE_TOL:
                flips.append(pos)
    return flips


def _diode_positions(circuit: Circuit) -> list[int]:
    return [pos for pos, idx in enumerate(circuit.switch_indices)
            if isinstance(circuit.elements[idx], Diode)]


def _search_diode_configs(circuit: Circuit, cache: MatrixCache, base: SwitchConfig,
                          knowns: KnownInputs, stats: Optional[RunStats]):
    """Fallback for a singular trial configuration: look for the nearest
    solvable diode assignment the solution itself justifies.  Controlled
    switch bits are fixed (they follow their gates)."""
    dpos = _diode_positions(circuit)
    candidates = []
    for mask in range(1 << len(dpos)):
        bits = list(base.bits)
        for j, pos in enumerate(dpos):
            bits[pos] = bool(mask >> j & 1)
        cand = SwitchConfig(tuple(bits))
        if cand.bits == base.bits:
            continue
        distance = sum(b1 != b2 for b1, b2 in zip(cand.bits, base.bits))
        candidates.append((distance, cand.mask, cand))
    for _, _, cand in sorted(candidates, key=lambda c: (c[0], c[1])):
        system = cache.get(circuit, cand)
        if system.singular:
            continue
        x = _solve_system(system, circuit, knowns, stats)
        if not _inconsistent_diodes(circuit, cand, x):
            return x, cand
    return None


def consistent_solve(
    circuit: Circuit,
    cache: MatrixCache,
    config: SwitchConfig,
    knowns: KnownInputs,
    relaxation: Optional[RelaxationOptions] = None,
    max_iters: Optional[int] = None,
    stats: Optional[RunStats] = None,
    prev_x: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, SwitchConfig]:
    """Solve A x = b, re-picking the switch configuration until the solution
    justifies it.

    Controlled-switch bits in ``config`` are authoritative (they follow the
    gate signals); diode bits are corrected here: all inconsistent diodes
    flip simultaneously and the system for the new configuration is solved
    from the cache.  A singular configuration is handed either to the
    relaxation sweep (when enabled) or to a search over nearby diode
    assignments; if neither yields a solvable consistent configuration,
    :class:`SingularConfigurationError` is raised.
    """
    if max_iters is None:
        max_iters = (1 << circuit.n_switches) + 1
    visited: set[int] = set()
    last_flips: list[int] = []
    for _ in range(max_iters):
        visited.add(config.mask)
        system = cache.get(circuit, config)
        if system.singular:
            if relaxation is not None:
                x = relaxed_solve(circuit, cache, config, knowns, prev_x,
                                  options=relaxation, stats=stats)
            else:
                found = _search_diode_configs(circuit, cache, config, knowns, stats)
                if found is None:
                    raise SingularConfigurationError(
                        f"configuration {config.describe(circuit)} is singular and no "
                        f"solvable consistent diode assignment exists; add r1/rp or "
                        f"enable relaxation"
                    )
                x, config = found
                return x, config
        else:
            x = _solve_system(system, circuit, knowns, stats)
        flips = _inconsistent_diodes(circuit, config, x)
        if not flips:
            return x, config
        last_flips = flips
        new_config = config
        for pos in flips:
            new_config = new_config.with_bit(pos, not config.bits[pos])
        if new_config.mask in visited:
            names = [circuit.elements[circuit.switch_indices[p]].name for p in flips]
            raise ConsistencyError(
                f"switch states oscillate between configurations; unstable "
                f"element(s): {', '.join(names)}"
            )
        config = new_config
    names = [circuit.elements[circuit.switch_indices[p]].name for p in last_flips]
    raise ConsistencyError(
        f"no consistent switch configuration within {max_iters} attempts; "
        f"last inconsistent element(s): {', '.join(names)}"
    )


def relaxed_solve(
    circuit: Circuit,
    cache: MatrixCache,
    config: SwitchConfig,
    knowns: KnownInputs,
    prev_x: Optional[np.ndarray] = None,
    options: RelaxationOptions = RelaxationOptions(),
    stats: Optional[RunStats] = None,
) -> np.ndarray:
    """Off-state relaxation sweep for a singular ideal configuration.

    Off switches are stamped ``i - G'(Va - Vb) = -I2`` with the compensating
    current I2 scaled by (k-1)/(kmax-1); sweeping k = 1..kmax moves the model
    from a pure G' leak (which assigns the floating node voltages) back to
    the ideal off equation i = 0.  At each k the right-hand side is iterated
    with the previously computed node voltages until they settle.
    """
    system = cache.get(circuit, config, relaxed=True)
    if system.singular:
        raise RelaxationError(
            f"configuration {config.describe(circuit)} is singular even with "
            f"relaxed off-state switches"
        )
    n_sw = circuit.n_switches
    if prev_x is not None and len(prev_x) == circuit.n_unknowns:
        x = np.asarray(prev_x, dtype=float).copy()
    else:
        x = np.zeros(circuit.n_unknowns)
    injections = np.zeros(n_sw)
    sw_nodes = [
        (circuit.elements[idx].a, circuit.elements[idx].b)
        for idx in circuit.switch_indices
    ]
    k_inputs = KnownInputs(knowns.state_values, knowns.source_values, injections)
    for k in range(1, options.kmax + 1):
        converged = False
        for _ in range(options.iters_max):
            for pos, row in system.relax_rows:
                a, b = sw_nodes[pos]
                injections[pos] = relaxation_injection(
                    _node_voltage(x, a), _node_voltage(x, b),
                    k, options.kmax, options.off_conductance,
                )
            x_new = _solve_system(system, circuit, k_inputs, stats)
            if stats is not None:
                stats.relaxation_solves += 1
            if k == 1:
                # injection factor is zero: the solve does not depend on x
                x = x_new
                converged = True
                break
            dv = float(np.max(np.abs(x_new[: circuit.nv] - x[: circuit.nv]))) \
                if circuit.nv else 0.0
            x = x_new
            if dv < 1e-9:
                converged = True
                break
        if not converged:
            raise RelaxationError(
                f"relaxation did not converge at k={k} within "
                f"{options.iters_max} iterations"
            )
    return x


def state_derivatives(circuit: Circuit, x: np.ndarray) -> np.ndarray:
    """dV_C/dt = i_C / C and di_L/dt = (V_a - V_b) / L from a solution."""
    derivs = np.empty(len(circuit.states))
    for i, sv in enumerate(circuit.states):
        e = circuit.elements[sv.elem_index]
        if sv.kind == "cap":
            derivs[i] = x[circuit.current_col[sv.elem_index]] / e.c
        else:
            derivs[i] = (_node_voltage(x, e.a) - _node_voltage(x, e.b)) / e.l
    return derivs


# ---------------------------------------------------------------------------
# control coupling helpers
# ---------------------------------------------------------------------------


_GATE_BINDINGS: dict[tuple[int, int], list[tuple[int, int]]] = {}


def _gate_bindings(circuit: Circuit, graph: ControlGraph) -> list[tuple[int, int]]:
    key = (id(circuit), id(graph))
    binding = _GATE_BINDINGS.get(key)
    if binding is None:
        binding = [
            (pos, graph.signal_id(circuit.elements[idx].gate))
            for pos, idx in enumerate(circuit.switch_indices)
            if isinstance(circuit.elements[idx], Switch)
        ]
        if len(_GATE_BINDINGS) > 256:
            _GATE_BINDINGS.clear()
        _GATE_BINDINGS[key] = binding
    return binding


def _apply_gates(circuit: Circuit, graph: Optional[ControlGraph],
                 signals: np.ndarray, config: SwitchConfig) -> SwitchConfig:
    """Controlled switches follow their gate signals; diode bits are kept."""
    if graph is None:
        return config
    binding = _gate_bindings(circuit, graph)
    if not binding:
        return config
    bits = list(config.bits)
    changed = False
    for pos, col in binding:
        on = signals[col] > 0.5
        if bits[pos] != on:
            bits[pos] = bool(on)
            changed = True
    return SwitchConfig(tuple(bits)) if changed else config


def _feedback(circuit: Circuit, x: np.ndarray) -> dict[str, float]:
    return {
        circuit.elements[idx].out: float(x[circuit.fb_col[idx]])
        for idx in circuit.meter_indices
    }


def _clamp_states(graph: Optional[ControlGraph], values: np.ndarray) -> np.ndarray:
    if graph is None or graph.n_states == 0:
        return values
    lo, hi = graph.state_limits()
    return np.clip(values, lo, hi)


def _eval_control(graph: Optional[ControlGraph], t: float, circuit: Circuit,
                  x: np.ndarray, ctrl_states: np.ndarray) -> np.ndarray:
    if graph is None:
        return np.zeros(0)
    return evaluate_passes(graph, t, _feedback(circuit, x), ctrl_states)


def _control_derivs(graph: Optional[ControlGraph], signals: np.ndarray,
                    ctrl_states: np.ndarray) -> np.ndarray:
    if graph is None or graph.n_states == 0:
        return np.zeros(0)
    return graph.state_derivatives(signals, ctrl_states)


def _settle_gates(circuit, cache, t, knowns, x, config, signals, ctrl_states,
                  controls, relaxation, max_iters, stats):
    """Re-solve an accepted point until its configuration agrees with the
    gates its own control pass produces.

    A comparator may flip exactly at a point (the planner schedules points
    around crossings and carrier vertices for that reason); without the
    re-solve the point's solution would still reflect the pre-edge circuit
    and the next step would start from inconsistent derivatives."""
    for _ in range(3):
        desired = _apply_gates(circuit, controls, signals, config)
        if desired.bits == config.bits:
            break
        x, config = consistent_solve(
            circuit, cache, desired, knowns,
            relaxation=relaxation, max_iters=max_iters, stats=stats, prev_x=x,
        )
        signals = _eval_control(controls, t, circuit, x, ctrl_states)
    return x, config, signals


# ---------------------------------------------------------------------------
# integrators
# ---------------------------------------------------------------------------


def fe_step(
    circuit: Circuit,
    cache: MatrixCache,
    snap: StateSnapshot,
    h: float,
    controls: Optional[ControlGraph] = None,
    cfg: Optional[SolverConfig] = None,
    stats: Optional[RunStats] = None,
) -> StateSnapshot:
    """One forward-Euler step: states advance by h times the derivatives at
    t_n, then the circuit is re-solved at t_{n+1} and the control block
    updated from the fresh solution."""
    if h <= 0:
        raise ValueError("step size must be positive")
    relaxation = cfg.relaxation_options() if cfg is not None else None
    max_iters = cfg.consistency_iters_max if cfg is not None else None
    t1 = snap.t + h
    states1 = snap.states + h * state_derivatives(circuit, snap.x)
    if controls is not None and controls.n_states:
        derivs_c = _control_derivs(controls, snap.control, snap.control_states)
        ctrl_states1 = _clamp_states(controls, snap.control_states + h * derivs_c)
    else:
        ctrl_states1 = snap.control_states
    config_guess = _apply_gates(circuit, controls, snap.control, snap.switch_config)
    knowns = KnownInputs(states1, circuit.source_values(t1))
    x1, config1 = consistent_solve(
        circuit, cache, config_guess, knowns,
        relaxation=relaxation, max_iters=max_iters, stats=stats, prev_x=snap.x,
    )
    signals1 = _eval_control(controls, t1, circuit, x1, ctrl_states1)
    x1, config1, signals1 = _settle_gates(
        circuit, cache, t1, knowns, x1, config1, signals1, ctrl_states1,
        controls, relaxation, max_iters, stats,
    )
    return StateSnapshot(t1, states1, x1, config1, signals1, ctrl_states1)


def rkf_step(
    circuit: Circuit,
    cache: MatrixCache,
    snap: StateSnapshot,
    h: float,
    tableau: RkfTableau = FEHLBERG45,
    controls: Optional[ControlGraph] = None,
    cfg: Optional[SolverConfig] = None,
    stats: Optional[RunStats] = None,
) -> tuple[StateSnapshot, np.ndarray]:
    """One trial RKF 4(5) step.

    Six stages; each stage advances states with its beta row, evaluates
    sources at t_n + alpha*h, solves the circuit (diode flips allowed), and
    updates the control block.  The candidate carries the 5th-order state
    estimate, solved once more at t_{n+1}; the returned error estimates are
    |5th - 4th| per state (electrical states first, then control states).
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    relaxation = cfg.relaxation_options() if cfg is not None else None
    max_iters = cfg.consistency_iters_max if cfg is not None else None
    n_es = len(circuit.states)
    has_ctrl = controls is not None
    n_cs = controls.n_states if has_ctrl else 0

    k_e = np.zeros((tableau.stages, n_es))
    k_c = np.zeros((tableau.stages, n_cs))
    k_e[0] = h * state_derivatives(circuit, snap.x)
    if n_cs:
        k_c[0] = h * _control_derivs(controls, snap.control, snap.control_states)

    signals = snap.control
    config = snap.switch_config
    x_stage = snap.x

    for m in range(1, tableau.stages):
        beta = tableau.beta_f[m]
        states_m = snap.states + beta @ k_e[:m] if n_es else snap.states
        if n_cs:
            ctrl_m = _clamp_states(controls, snap.control_states + beta @ k_c[:m])
        else:
            ctrl_m = snap.control_states
        t_m = snap.t + tableau.alpha_f[m] * h
        config_guess = _apply_gates(circuit, controls, signals, config)
        knowns = KnownInputs(states_m, circuit.source_values(t_m))
        x_stage, config = consistent_solve(
            circuit, cache, config_guess, knowns,
            relaxation=relaxation, max_iters=max_iters, stats=stats, prev_x=x_stage,
        )
        if has_ctrl:
            signals = _eval_control(controls, t_m, circuit, x_stage, ctrl_m)
        k_e[m] = h * state_derivatives(circuit, x_stage)
        if n_cs:
            k_c[m] = h * _control_derivs(controls, signals, ctrl_m)

    states5 = snap.states + tableau.gamma5_f @ k_e if n_es else snap.states.copy()
    states4 = snap.states + tableau.gamma4_f @ k_e if n_es else snap.states.copy()
    lte_e = np.abs(states5 - states4)
    if n_cs:
        ctrl5 = _clamp_states(controls, snap.control_states + tableau.gamma5_f @ k_c)
        ctrl4 = _clamp_states(controls, snap.control_states + tableau.gamma4_f @ k_c)
        lte_c = np.abs(ctrl5 - ctrl4)
    else:
        ctrl5 = snap.control_states
        lte_c = np.zeros(0)

    t1 = snap.t + h
    config_guess = _apply_gates(circuit, controls, signals, config)
    knowns = KnownInputs(states5, circuit.source_values(t1))
    x1, config1 = consistent_solve(
        circuit, cache, config_guess, knowns,
        relaxation=relaxation, max_iters=max_iters, stats=stats, prev_x=x_stage,
    )
    signals1 = _eval_control(controls, t1, circuit, x1, ctrl5)
    x1, config1, signals1 = _settle_gates(
        circuit, cache, t1, knowns, x1, config1, signals1, ctrl5,
        controls, relaxation, max_iters, stats,
    )
    candidate = StateSnapshot(t1, states5, x1, config1, signals1, ctrl5)
    return candidate, np.concatenate([lte_e, lte_c])


def adapt_step(lte: np.ndarray, h: float, cfg: SolverConfig) -> tuple[bool, float]:
    """Accept iff max(lte) <= tol; propose the next step from the standard
    quarter-power rule with a 0.84 safety factor, growth capped at 4x and
    shrink floored at 0.1x, clamped to [h_min, h_max]."""
    max_lte = float(np.max(lte)) if len(lte) else 0.0
    accept = max_lte <= cfg.lte_tol
    if max_lte == 0.0:
        factor = 4.0
    else:
        factor = min(4.0, max(0.1, 0.84 * (cfg.lte_tol / max_lte) ** 0.25))
    h_next = min(cfg.h_max, max(cfg.h_min, h * factor))
    return accept, h_next


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------


@dataclass
class RunWarning:
    kind: str
    t: float
    message: str


@dataclass
class SimulationResult:
    """Time-ordered trajectory plus the event log, warnings and statistics."""

    circuit: Circuit
    controls: Optional[ControlGraph]
    method: str
    t: np.ndarray
    states: np.ndarray
    x: np.ndarray
    configs: np.ndarray
    control_signals: np.ndarray
    control_states: np.ndarray
    events: list
    warnings: list[RunWarning]
    stats: RunStats

    def __post_init__(self):
        self._columns: dict[str, tuple[str, int]] = {}
        for i, label in enumerate(self.circuit.unknown_labels):
            self._columns[label] = ("x", i)
        if self.controls is not None:
            external = set(self.controls.external_inputs)
            for i, name in enumerate(self.controls.signal_names):
                if name not in external and name not in self._columns:
                    self._columns[name] = ("ctrl", i)

    def column_names(self) -> list[str]:
        return list(self._columns)

    def signal(self, name: str) -> np.ndarray:
        """Waveform by column name: V(node), i(element), meter or control
        signal names; 't' returns the time axis."""
        if name == "t":
            return self.t
        try:
            where, col = self._columns[name]
        except KeyError:
            raise KeyError(
                f"unknown signal {name!r}; available: t, {', '.join(self._columns)}"
            ) from None
        return self.x[:, col] if where == "x" else self.control_signals[:, col]

    def state(self, element_name: str) -> np.ndarray:
        idx = self.circuit.element_index(element_name)
        for i, sv in enumerate(self.circuit.states):
            if sv.elem_index == idx:
                return self.states[:, i]
        raise KeyError(f"{element_name!r} carries no state variable")

    def switch_on(self, element_name: str) -> np.ndarray:
        idx = self.circuit.element_index(element_name)
        pos = self.circuit.switch_indices.index(idx)
        return self.configs[:, pos]


class _Recorder:
    def __init__(self, circuit: Circuit, graph: Optional[ControlGraph]):
        self.circuit = circuit
        self.graph = graph
        self.rows: list[StateSnapshot] = []

    def add(self, snap: StateSnapshot) -> None:
        self.rows.append(snap)

    def result(self, method: str, events: list, warnings: list[RunWarning],
               stats: RunStats) -> SimulationResult:
        n = len(self.rows)
        n_sw = self.circuit.n_switches
        t = np.array([s.t for s in self.rows])
        states = np.array([s.states for s in self.rows]).reshape(n, -1)
        x = np.array([s.x for s in self.rows]).reshape(n, -1)
        configs = np.array([s.switch_config.bits for s in self.rows],
                           dtype=bool).reshape(n, n_sw)
        sig = np.array([s.control for s in self.rows]).reshape(n, -1)
        cst = np.array([s.control_states for s in self.rows]).reshape(n, -1)
        return SimulationResult(
            circuit=self.circuit, controls=self.graph, method=method,
            t=t, states=states, x=x, configs=configs,
            control_signals=sig, control_states=cst,
            events=events, warnings=warnings, stats=stats,
        )


def _initial_snapshot(circuit: Circuit, cache: MatrixCache, graph, cfg, stats):
    """Solve the t=0 point.

    Diodes start off and settle through the consistency loop; controlled
    switches follow their gates from the start, so the control block is
    evaluated first (with zero feedback) to seed them, then the solve and
    the control pass repeat until gates and configuration agree."""
    states0 = circuit.initial_states()
    ctrl_states0 = graph.initial_states() if graph is not None else np.zeros(0)
    config = SwitchConfig.all_off(circuit.n_switches)
    if graph is not None:
        zero_fb = {name: 0.0 for name in circuit.feedback_signals()}
        signals = evaluate_passes(graph, 0.0, zero_fb, ctrl_states0)
    else:
        signals = np.zeros(0)
    knowns = KnownInputs(states0, circuit.source_values(0.0))
    relaxation = cfg.relaxation_options()
    x0 = np.zeros(circuit.n_unknowns)
    for _ in range(circuit.n_switches + 2):
        config_guess = _apply_gates(circuit, graph, signals, config)
        x0, config = consistent_solve(
            circuit, cache, config_guess, knowns,
            relaxation=relaxation, max_iters=cfg.consistency_iters_max,
            stats=stats, prev_x=x0,
        )
        signals = _eval_control(graph, 0.0, circuit, x0, ctrl_states0)
        if _apply_gates(circuit, graph, signals, config).bits == config.bits:
            break
    return StateSnapshot(0.0, states0, x0, config, signals, ctrl_states0)


def _config_events(circuit: Circuit, prev: StateSnapshot, new: StateSnapshot, events: list):
    from .events import EventRecord

    for pos, idx in enumerate(circuit.switch_indices):
        was, now = prev.switch_config.bits[pos], new.switch_config.bits[pos]
        if was == now:
            continue
        e = circuit.elements[idx]
        if isinstance(e, Diode):
            kind = "diode_turnon" if now else "diode_turnoff"
        else:
            kind = "gate_edge"
        events.append(EventRecord(kind=kind, t_before=prev.t, t_after=new.t,
                                  element=e.name))


def _monitor_warnings(circuit: Circuit, snap: StateSnapshot, cfg: SolverConfig,
                      active: set, warnings: list[RunWarning]):
    from .events import monitor_inductor_loop

    for name, magnitude in monitor_inductor_loop(circuit, snap, cfg.loop_voltage_warn):
        if name not in active:
            active.add(name)
            warnings.append(RunWarning(
                kind="inductor_loop_voltage", t=snap.t,
                message=f"inductor {name!r} drop {magnitude:.3e} V exceeds "
                        f"{cfg.loop_voltage_warn:.3e} V at t={snap.t:.6e}",
            ))
    still = {name for name, _ in monitor_inductor_loop(circuit, snap, cfg.loop_voltage_warn)}
    active.intersection_update(still)


def _gates_changed(circuit: Circuit, a: SwitchConfig, b: SwitchConfig) -> bool:
    for pos, idx in enumerate(circuit.switch_indices):
        if isinstance(circuit.elements[idx], Switch) and a.bits[pos] != b.bits[pos]:
            return True
    return False


def _diode_turnoffs(circuit: Circuit, prev: SwitchConfig, new: SwitchConfig) -> list[int]:
    return [
        pos for pos, idx in enumerate(circuit.switch_indices)
        if isinstance(circuit.elements[idx], Diode)
        and prev.bits[pos] and not new.bits[pos]
    ]


def run(
    circuit: Circuit,
    cfg: SolverConfig,
    method: str = "rkf",
    controls: Optional[ControlGraph] = None,
) -> SimulationResult:
    """Simulate from t=0 to cfg.t_end with the FE or RKF method.

    RKF runs the crossover planner (scheduled points are never stepped
    over) and localizes natural diode turn-offs by bisection; FE is the
    plain fixed-step loop.  FE runs are scanned afterwards for the
    sign-alternating diode-current signature of an unstable step size.
    """
    from . import events as ev

    method = method.lower()
    cfg = cfg.resolved(method)
    if controls is not None:
        missing = [s for s in controls.external_inputs
                   if s not in circuit.feedback_signals()]
        if missing:
            raise ValueError(
                f"control inputs {missing} are neither block outputs nor "
                f"meter signals"
            )
    for gate in circuit.gate_signals():
        if controls is None:
            raise ValueError(f"switch gate signal {gate!r} needs a control graph")
        controls.signal_id(gate)

    cache = MatrixCache(off_conductance=cfg.relaxation_g)
    stats = RunStats()
    events: list = []
    warnings: list[RunWarning] = []
    recorder = _Recorder(circuit, controls)
    loop_active: set = set()

    snap = _initial_snapshot(circuit, cache, controls, cfg, stats)
    recorder.add(snap)
    stats.accepted += 1
    _monitor_warnings(circuit, snap, cfg, loop_active, warnings)

    t_eps = 1e-15 * max(1.0, cfg.t_end)

    def over_budget() -> bool:
        if cfg.max_steps is not None and stats.accepted >= cfg.max_steps:
            warnings.append(RunWarning(
                kind="step_budget", t=snap.t,
                message=f"stopped at t={snap.t:.6e}: accepted-step budget "
                        f"({cfg.max_steps}) exhausted before t_end",
            ))
            return True
        return False

    if method == "fe":
        while snap.t < cfg.t_end - t_eps:
            if over_budget():
                break
            h = min(cfg.h_init, cfg.t_end - snap.t)
            new = fe_step(circuit, cache, snap, h, controls, cfg, stats)
            _config_events(circuit, snap, new, events)
            recorder.add(new)
            stats.accepted += 1
            _monitor_warnings(circuit, new, cfg, loop_active, warnings)
            snap = new
        _fe_oscillation_warnings(circuit, recorder, warnings)
    else:
        planner = None
        if controls is not None and cfg.crossover_planner:
            planner = ev.CrossoverPlanner(controls, delta=max(cfg.event_dt, 1e-9))
            planner.observe(snap.t, snap.control)
        h_ctrl = cfg.h_init
        h_resume = None  # healthy step size to restore after a clamped-step kink
        while snap.t < cfg.t_end - t_eps:
            if over_budget():
                break
            h_cap = min(h_ctrl, cfg.h_max, cfg.t_end - snap.t)
            planned = planner.plan(snap.t, h_cap) if planner is not None else None
            if planned is not None:
                h_step = planned.t - snap.t
                clamped = True
            else:
                h_step = h_cap
                clamped = False
            candidate, lte = rkf_step(circuit, cache, snap, h_step,
                                      FEHLBERG45, controls, cfg, stats)
            accept, h_next = adapt_step(lte, h_step, cfg)

            # a natural turn-off inside the step (no gate edge involved) is
            # localized instead of resolved by step shrinking.  A rejected
            # step can also hide a crossing: a stage that overshoots into
            # negative diode current picks up the huge L-rp loop derivative
            # and blows up the error estimate before the final configuration
            # ever flips, so the probe inside the bisection decides.
            turnoffs = _diode_turnoffs(circuit, snap.switch_config,
                                       candidate.switch_config)
            has_on_diodes = any(
                snap.switch_config.bits[pos]
                for pos, idx in enumerate(circuit.switch_indices)
                if isinstance(circuit.elements[idx], Diode)
            )
            if has_on_diodes and (turnoffs or not accept) and \
                    not _gates_changed(circuit, snap.switch_config,
                                       candidate.switch_config):
                try:
                    before, after, record = ev.bisect_diode_turnoff(
                        circuit, cache, snap, candidate.t, cfg,
                        controls=controls, stats=stats,
                    )
                except ev.EventError as exc:
                    if turnoffs:
                        warnings.append(RunWarning(
                            kind="event_localization", t=candidate.t,
                            message=f"turn-off bisection abandoned: {exc}",
                        ))
                else:
                    if cfg.turnoff_substitution:
                        after = _apply_substitution(circuit, cache, after, cfg,
                                                    controls, stats)
                    for point in (before, after):
                        recorder.add(point)
                        stats.accepted += 1
                        _monitor_warnings(circuit, point, cfg, loop_active, warnings)
                        if planner is not None:
                            planner.observe(point.t, point.control)
                    events.append(record)
                    snap = after
                    if h_resume is not None:
                        h_ctrl = max(h_ctrl, h_resume)
                        h_resume = None
                    continue
            if not accept and h_step <= cfg.h_min * (1 + 1e-9):
                accept = True
                warnings.append(RunWarning(
                    kind="accuracy_floor", t=candidate.t,
                    message=f"step at h_min={cfg.h_min:.3e} exceeds lte_tol "
                            f"(max lte {float(np.max(lte)):.3e}) at t={candidate.t:.6e}",
                ))
            if not accept:
                stats.rejected += 1
                if clamped and h_resume is None:
                    # the offending kink lives inside the scheduled interval;
                    # remember the healthy step for after it
                    h_resume = h_ctrl
                h_ctrl = h_next
                continue

            if h_resume is not None:
                h_next = max(h_next, h_resume)
                h_resume = None
            if planned is not None and planned.kind == "crossover":
                events.append(ev.EventRecord(
                    kind="comparator_crossover", t_before=snap.t,
                    t_after=candidate.t, element=planned.name,
                ))
            _config_events(circuit, snap, candidate, events)
            recorder.add(candidate)
            stats.accepted += 1
            _monitor_warnings(circuit, candidate, cfg, loop_active, warnings)
            if planner is not None:
                planner.observe(candidate.t, candidate.control)
            snap = candidate
            h_ctrl = max(h_ctrl, h_next) if clamped else h_next

    stats.assemblies = cache.assemblies
    stats.cache_entries = len(cache)
    return recorder.result(method, events, warnings, stats)


def _apply_substitution(circuit, cache, after: StateSnapshot, cfg, controls, stats):
    """Seed inductor states from their series branch currents right after a
    localized diode turn-off, then re-solve so the snapshot stays consistent."""
    from .events import apply_turnoff_substitution

    new_states = apply_turnoff_substitution(circuit, after)
    if np.array_equal(new_states, after.states):
        return after
    knowns = KnownInputs(new_states, circuit.source_values(after.t))
    x, config = consistent_solve(
        circuit, cache, after.switch_config, knowns,
        relaxation=cfg.relaxation_options(), max_iters=cfg.consistency_iters_max,
        stats=stats, prev_x=after.x,
    )
    signals = _eval_control(controls, after.t, circuit, x, after.control_states)
    x, config, signals = _settle_gates(
        circuit, cache, after.t, knowns, x, config, signals, after.control_states,
        controls, cfg.relaxation_options(), cfg.consistency_iters_max, stats,
    )
    return StateSnapshot(after.t, new_states, x, config, signals,
                         after.control_states)


def _fe_oscillation_warnings(circuit: Circuit, recorder: _Recorder,
                             warnings: list[RunWarning]):
    from .events import detect_sign_alternation

    rows = recorder.rows
    if len(rows) < 12:
        return
    times = [s.t for s in rows]
    for idx in circuit.switch_indices:
        e = circuit.elements[idx]
        if not isinstance(e, Diode):
            continue
        col = circuit.current_col[idx]
        current = np.array([s.x[col] for s in rows])
        atol = 1e-12 * max(1.0, float(np.max(np.abs(current))))
        runs = detect_sign_alternation(current, min_run=10, atol=atol)
        for start, end in runs:
            warnings.append(RunWarning(
                kind="fe_oscillation", t=times[start],
                message=f"diode {e.name!r} current alternates sign over "
                        f"{end - start + 1} consecutive differences "
                        f"(t={times[start]:.6e}..{times[end + 1]:.6e}); "
                        f"the fixed step likely exceeds twice the smallest "
                        f"time constant",
            ))
