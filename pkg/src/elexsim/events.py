"""Switching-event machinery: diode turn-off localization by binary search,
comparator cross-over scheduling, and the inductor loop-voltage monitor."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .assembly import KnownInputs, SwitchConfig, build_rhs
from .control import CARRIER_KINDS, ControlGraph
from .engine import (
    MatrixCache,
    RunStats,
    SolverConfig,
    StateSnapshot,
    _control_derivs,
    _eval_control,
    _node_voltage,
    _settle_gates,
    _solve_system,
    consistent_solve,
    state_derivatives,
)
from .linsolve import SingularSystemError
from .netlist import Circuit, Diode, Inductor

__all__ = [
    "DIODE_OFF_CURRENT",
    "EventError",
    "EventRecord",
    "PlannedPoint",
    "bisect_diode_turnoff",
    "apply_turnoff_substitution",
    "CrossoverPlanner",
    "monitor_inductor_loop",
    "detect_sign_alternation",
]

# a conducting diode is considered "at" its turn-off point once its current
# drops below this
DIODE_OFF_CURRENT = 1e-12

_MAX_BISECTIONS = 200


class EventError(RuntimeError):
    """Event localization failed (bad bracket, ambiguous crossing)."""


@dataclass
class EventRecord:
    kind: str  # diode_turnoff | diode_turnon | gate_edge | comparator_crossover
    t_before: float
    t_after: float
    element: str
    detail: str = ""


@dataclass(frozen=True)
class PlannedPoint:
    t: float
    kind: str  # crossover | carrier_vertex
    name: str


def _advance_states(snap: StateSnapshot, derivs: np.ndarray, t: float) -> np.ndarray:
    return snap.states + (t - snap.t) * derivs


class _OnTrials:
    """Euler trial advances from an anchor snapshot with the conducting
    configuration held fixed, exposing the smallest on-diode current."""

    def __init__(self, circuit, cache, anchor: StateSnapshot, cols, stats):
        self.circuit = circuit
        self.anchor = anchor
        self.cols = cols
        self.stats = stats
        self.derivs = state_derivatives(circuit, anchor.x)
        self.system = cache.get(circuit, anchor.switch_config)
        if self.system.singular:
            raise EventError(
                f"bracket configuration "
                f"{anchor.switch_config.describe(circuit)} is singular"
            )

    def states(self, t: float) -> np.ndarray:
        return _advance_states(self.anchor, self.derivs, t)

    def __call__(self, t: float) -> tuple[np.ndarray, float]:
        knowns = KnownInputs(self.states(t), self.circuit.source_values(t))
        try:
            x = _solve_system(self.system, self.circuit, knowns, self.stats)
        except SingularSystemError as exc:  # pragma: no cover - guarded in init
            raise EventError(str(exc)) from exc
        return x, min(float(x[c]) for c in self.cols)


def _bisect(trials: _OnTrials, lo: float, hi: float, x_lo, i_lo, x_hi,
            width_target: float, current_target: float):
    """Halve [lo, hi] until width <= width_target and i(lo) <= current_target."""
    iters = 0
    while (hi - lo) > width_target or i_lo > current_target:
        mid = 0.5 * (lo + hi)
        if not (lo < mid < hi):
            break  # bracket at machine resolution
        x_mid, i_mid = trials(mid)
        if i_mid > 0.0:
            lo, x_lo, i_lo = mid, x_mid, i_mid
        else:
            hi, x_hi = mid, x_mid
        iters += 1
        if iters > _MAX_BISECTIONS:
            raise EventError(
                f"turn-off bracket failed to narrow after {iters} bisections "
                f"(width {hi - lo:.3e} s, on-side current {i_lo:.3e} A)"
            )
    return lo, hi, x_lo, i_lo, x_hi, iters


def bisect_diode_turnoff(
    circuit: Circuit,
    cache: MatrixCache,
    snap_on: StateSnapshot,
    t_cross_hi: float,
    cfg: SolverConfig,
    controls: Optional[ControlGraph] = None,
    stats: Optional[RunStats] = None,
) -> tuple[StateSnapshot, StateSnapshot, EventRecord]:
    """Narrow the bracket around a diode turn-off instant.

    Trial points advance the states Euler-style and solve the circuit with
    the conducting configuration held fixed, so the diode current can be
    read as it crosses zero.  To keep the emitted points at integration
    accuracy the search runs twice: a rough pass locates the crossing, a
    regular RKF sub-step then lands an anchor just before it, and the fine
    pass from that anchor narrows until the bracket is at most
    ``cfg.event_dt`` wide *and* the on-side current is at most
    ``DIODE_OFF_CURRENT``.  The returned pair is the last on-side point
    (diode still conducting, current ~ 0) and the first off-side point
    (diode off, current exactly zero); both become simulation time points.
    """
    from .engine import rkf_step

    config_on = snap_on.switch_config
    on_positions = [
        pos for pos, idx in enumerate(circuit.switch_indices)
        if isinstance(circuit.elements[idx], Diode) and config_on.bits[pos]
    ]
    if not on_positions:
        raise EventError("no conducting diode at the bracket start")
    cols = [circuit.current_col[circuit.switch_indices[pos]] for pos in on_positions]

    i_start = min(float(snap_on.x[c]) for c in cols)
    if i_start <= 0.0:
        raise EventError(
            f"diode current must be positive at the bracket start "
            f"(got {i_start:.3e} A at t={snap_on.t:.6e})"
        )
    if not t_cross_hi > snap_on.t:
        raise EventError("bracket end must lie after the bracket start")

    trials = _OnTrials(circuit, cache, snap_on, cols, stats)
    x_hi, i_hi = trials(t_cross_hi)
    if i_hi > 0.0:
        raise EventError(
            f"diode current is still positive ({i_hi:.3e} A) at the bracket "
            f"end t={t_cross_hi:.6e}; no turn-off inside the bracket"
        )

    # rough pass: locate the crossing on the Euler-trial trajectory
    span = t_cross_hi - snap_on.t
    lo, hi, x_lo, i_lo, x_hi, iters = _bisect(
        trials, snap_on.t, t_cross_hi, snap_on.x, i_start, x_hi,
        width_target=max(cfg.event_dt, 1e-3 * span),
        current_target=np.inf,
    )

    # anchor: full-accuracy step to just before the crossing, then re-search
    # the small remainder so the Euler advances cost no accuracy
    anchor = snap_on
    t_anchor = snap_on.t + 0.98 * (lo - snap_on.t)
    if t_anchor - snap_on.t > max(4 * cfg.event_dt, 1e-6 * span):
        candidate, lte_a = rkf_step(circuit, cache, snap_on, t_anchor - snap_on.t,
                                    controls=controls, cfg=cfg, stats=stats)
        if len(lte_a) and float(np.max(lte_a)) > cfg.lte_tol:
            raise EventError(
                f"anchor step to t={t_anchor:.9e} exceeds the error tolerance; "
                f"retry from a smaller step"
            )
        i_anchor = min(float(candidate.x[c]) for c in cols)
        if candidate.switch_config.bits == config_on.bits and i_anchor > 0.0:
            anchor = candidate
            trials = _OnTrials(circuit, cache, anchor, cols, stats)
            x_hi, i_hi = trials(hi)
            more = 0
            while i_hi > 0.0 and more < 60:
                # crossing slipped past the rough bracket; widen toward t_cross_hi
                hi = min(t_cross_hi, hi + max(hi - anchor.t, cfg.event_dt))
                x_hi, i_hi = trials(hi)
                more += 1
                if hi >= t_cross_hi and i_hi > 0.0:
                    raise EventError(
                        "crossing lost after anchoring; derivative sign ambiguous"
                    )
            lo, x_lo, i_lo = anchor.t, anchor.x, i_anchor
            lo, hi, x_lo, i_lo, x_hi, fine_iters = _bisect(
                trials, lo, hi, x_lo, i_lo, x_hi,
                width_target=cfg.event_dt, current_target=DIODE_OFF_CURRENT,
            )
            iters += fine_iters + more
        else:
            # the anchor step itself flipped the diode; keep searching from
            # the original point instead
            lo, hi, x_lo, i_lo, x_hi, fine_iters = _bisect(
                trials, lo, hi, x_lo, i_lo, x_hi,
                width_target=cfg.event_dt, current_target=DIODE_OFF_CURRENT,
            )
            iters += fine_iters
    else:
        lo, hi, x_lo, i_lo, x_hi, fine_iters = _bisect(
            trials, lo, hi, x_lo, i_lo, x_hi,
            width_target=cfg.event_dt, current_target=DIODE_OFF_CURRENT,
        )
        iters += fine_iters

    if stats is not None:
        stats.bisection_iters += iters
    if i_lo > DIODE_OFF_CURRENT:
        raise EventError(
            f"on-side diode current stuck at {i_lo:.3e} A with bracket at "
            f"machine resolution; derivative sign is ambiguous"
        )

    base = trials.anchor
    ctrl_derivs = _control_derivs(controls, base.control, base.control_states) \
        if controls is not None else np.zeros(0)

    def ctrl_states_at(t: float) -> np.ndarray:
        if controls is None or not controls.n_states:
            return base.control_states
        return base.control_states + (t - base.t) * ctrl_derivs

    # on-side point: conducting configuration, tiny positive current
    states_lo = trials.states(lo)
    cs_lo = ctrl_states_at(lo)
    signals_lo = _eval_control(controls, lo, circuit, x_lo, cs_lo)
    before = StateSnapshot(lo, states_lo, x_lo, config_on, signals_lo, cs_lo)

    # off-side point: crossed diodes opened, then solved self-consistently
    crossed = [pos for pos, c in zip(on_positions, cols)
               if float(x_hi[c]) <= DIODE_OFF_CURRENT]
    config_off = config_on
    for pos in crossed:
        config_off = config_off.with_bit(pos, False)
    states_hi = trials.states(hi)
    knowns_hi = KnownInputs(states_hi, circuit.source_values(hi))
    x_after, config_after = consistent_solve(
        circuit, cache, config_off, knowns_hi,
        relaxation=cfg.relaxation_options(),
        max_iters=cfg.consistency_iters_max, stats=stats, prev_x=x_hi,
    )
    cs_hi = ctrl_states_at(hi)
    signals_hi = _eval_control(controls, hi, circuit, x_after, cs_hi)
    x_after, config_after, signals_hi = _settle_gates(
        circuit, cache, hi, knowns_hi, x_after, config_after, signals_hi, cs_hi,
        controls, cfg.relaxation_options(), cfg.consistency_iters_max, stats,
    )
    after = StateSnapshot(hi, states_hi, x_after, config_after, signals_hi, cs_hi)

    names = ", ".join(
        circuit.elements[circuit.switch_indices[pos]].name for pos in crossed
    )
    record = EventRecord(
        kind="diode_turnoff", t_before=lo, t_after=hi, element=names,
        detail=f"bracket {hi - lo:.3e} s, i_before {i_lo:.3e} A, {iters} bisections",
    )
    return before, after, record


def apply_turnoff_substitution(circuit: Circuit, snap_after: StateSnapshot) -> np.ndarray:
    """State seed for the step following a localized turn-off.

    An inductor with a parallel rp is left carrying a tiny current that
    exactly cancels the rp current; integrating from it keeps that pair
    circulating with the L/rp time constant and collapses the step size.
    Replacing the inductor state with its series branch current (exactly
    zero once the surrounding switches are off) makes the state collapse
    immediately instead.
    """
    states = snap_after.states.copy()
    for i, sv in enumerate(circuit.states):
        e = circuit.elements[sv.elem_index]
        if sv.kind == "ind" and isinstance(e, Inductor) and e.rp is not None:
            states[i] = float(snap_after.x[circuit.current_col[sv.elem_index]])
    return states


class CrossoverPlanner:
    """Schedules time points around comparator crossings and carrier vertices.

    Between vertices every carrier is linear, so crossings are predicted by
    intersecting straight lines: carriers contribute their exact segment,
    any other comparator input is extrapolated from its last two accepted
    samples.  A predicted crossing at t_c yields points at t_c - delta and
    t_c + delta; triangle vertices are scheduled as plain points, sawtooth
    resets (where the comparator flips) get the same +-delta sandwich.
    """

    def __init__(self, graph: ControlGraph, delta: float = 1e-9):
        self.graph = graph
        self.delta = delta
        by_name = {b.name: b for b in graph.blocks}
        self.comparators = []
        tracked: set[int] = set()
        for b in graph.blocks:
            if b.kind != "comp":
                continue
            sides = []
            for name in b.inputs:
                src = by_name.get(name)
                if src is not None and src.kind in CARRIER_KINDS:
                    sides.append(("carrier", src))
                else:
                    sid = graph.signal_id(name)
                    sides.append(("history", sid))
                    tracked.add(sid)
            self.comparators.append((b.name, sides))
        self.tracked = sorted(tracked)
        self.history: dict[int, list[tuple[float, float]]] = {s: [] for s in self.tracked}

    def observe(self, t: float, signals: np.ndarray) -> None:
        """Record an accepted point for extrapolation."""
        for sid in self.tracked:
            h = self.history[sid]
            if h and h[-1][0] == t:
                h[-1] = (t, float(signals[sid]))
                continue
            h.append((t, float(signals[sid])))
            if len(h) > 2:
                del h[0]

    # -- carrier geometry ---------------------------------------------------

    @staticmethod
    def _carrier_segment(block, t: float) -> tuple[float, float, float]:
        """(value at t, slope, segment end) of the piecewise-linear carrier."""
        f = block.params["f"]
        lo, hi = block.params["min"], block.params["max"]
        if block.kind == "saw":
            k = math.floor(t * f)
            phase = t * f - k
            return lo + (hi - lo) * phase, (hi - lo) * f, (k + 1) / f
        k = math.floor(2 * t * f)
        half = 1.0 / (2 * f)
        phase = t * f - math.floor(t * f)
        if phase < 0.5:
            value = lo + (hi - lo) * 2 * phase
            slope = 2 * (hi - lo) * f
        else:
            value = lo + (hi - lo) * 2 * (1 - phase)
            slope = -2 * (hi - lo) * f
        return value, slope, (k + 1) * half

    def _line(self, side, t: float) -> Optional[tuple[float, float, float]]:
        kind, payload = side
        if kind == "carrier":
            return self._carrier_segment(payload, t)
        h = self.history[payload]
        if not h:
            return None
        if len(h) == 1:
            return h[0][1], 0.0, math.inf
        (t0, v0), (t1, v1) = h
        if t1 <= t0:
            return v1, 0.0, math.inf
        slope = (v1 - v0) / (t1 - t0)
        return v1 + slope * (t - t1), slope, math.inf

    def _vertex_candidates(self, t: float, window_end: float, tiny: float):
        for b in self.graph.carriers:
            f = b.params["f"]
            if b.kind == "saw":
                k = math.floor(t * f)
                for boundary in ((k * 1.0) / f, (k + 1.0) / f):
                    for point in (boundary - self.delta, boundary + self.delta):
                        if t + tiny < point <= window_end:
                            yield PlannedPoint(point, "carrier_vertex", b.name)
            else:
                half = 1.0 / (2 * f)
                k = math.floor(t / half)
                for boundary in (k * half, (k + 1) * half):
                    if t + tiny < boundary <= window_end:
                        yield PlannedPoint(boundary, "carrier_vertex", b.name)

    def _crossing_candidates(self, t: float, window_end: float, tiny: float):
        for name, sides in self.comparators:
            line_a = self._line(sides[0], t)
            line_b = self._line(sides[1], t)
            if line_a is None or line_b is None:
                continue
            a0, sa, end_a = line_a
            b0, sb, end_b = line_b
            seg_end = min(end_a, end_b)
            ds = sa - sb
            if ds == 0.0:
                continue
            tau = (b0 - a0) / ds
            t_c = t + tau
            if tau <= 0 or t_c > seg_end:
                continue
            # the exact point between the sandwich pair lets the gate flip
            # land on a step boundary instead of inside a step
            for point in (t_c - self.delta, t_c, t_c + self.delta):
                if t + tiny < point <= window_end:
                    yield PlannedPoint(point, "crossover", name)
                    break

    def plan(self, t: float, h_candidate: float) -> Optional[PlannedPoint]:
        """Earliest scheduled point in (t, t + h_candidate], if any."""
        if h_candidate <= 0:
            return None
        window_end = t + h_candidate
        tiny = 1e-15 * max(1.0, abs(t))
        best: Optional[PlannedPoint] = None
        for cand in self._vertex_candidates(t, window_end, tiny):
            if best is None or cand.t < best.t:
                best = cand
        for cand in self._crossing_candidates(t, window_end, tiny):
            if best is None or cand.t < best.t:
                best = cand
        return best

    def plan_crossover_points(self, t: float, h_candidate: float) -> Optional[float]:
        """Step limit in (t, t + h_candidate], or None when nothing is due."""
        p = self.plan(t, h_candidate)
        return None if p is None else p.t


def monitor_inductor_loop(circuit: Circuit, snap: StateSnapshot,
                          threshold: float) -> list[tuple[str, float]]:
    """Inductors with rp whose terminal voltage magnitude strictly exceeds
    the threshold (a state forced through rp makes |V_L| ~ i_L * rp)."""
    flagged = []
    for e in circuit.elements:
        if isinstance(e, Inductor) and e.rp is not None:
            v = abs(_node_voltage(snap.x, e.a) - _node_voltage(snap.x, e.b))
            if v > threshold:
                flagged.append((e.name, v))
    return flagged


def detect_sign_alternation(values: np.ndarray, min_run: int = 10,
                            atol: float = 0.0) -> list[tuple[int, int]]:
    """Index ranges (into the first-difference array) where at least
    ``min_run`` consecutive differences strictly alternate in sign.
    Differences with magnitude <= atol break a run."""
    d = np.diff(np.asarray(values, dtype=float))
    signs = np.where(d > atol, 1, np.where(d < -atol, -1, 0))
    runs: list[tuple[int, int]] = []
    start = 0
    length = 0
    for i, s in enumerate(signs):
        if s == 0:
            if length >= min_run:
                runs.append((start, i - 1))
            length = 0
        elif length == 0 or s != -signs[i - 1]:
            if length >= min_run:
                runs.append((start, i - 1))
            start, length = i, 1
        else:
            length += 1
    if length >= min_run:
        runs.append((start, len(signs) - 1))
    return runs
