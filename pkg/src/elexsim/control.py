"""Control-block flow graph: sources, arithmetic, comparators, limited
integrators, and first-order filters decomposed for explicit integration.

Blocks are declared in the netlist's ``[control]`` section, one per line,
``name kind input... key=value...``; the block name is also its output
signal name.  Kinds:

    const v=<val>                         constant source
    sine  im=<amp> f=<Hz> [phase=<rad>]   sinusoidal reference
    tri   min= max= f=                    symmetric triangle carrier
    saw   min= max= f=                    sawtooth carrier
    sum   [+|-]in ...                     signed sum (default sign +)
    gain  in k=<K>                        scalar gain
    comp  in_a in_b [outb=<name>]         1 if a > b else 0; outb is the
                                          complementary output
    int   in [gain=1] [min=] [max=]       integrator, output clamped
    filt  in kc= wz= wp=                  first-order lead/lag
                                          Kc (1 + s/wz) / (1 + s/wp)

Evaluation happens in passes after each electrical solve: sources (and
integrator outputs, which are just their states) fire first, then each
pass fires every block whose inputs are all fresh, until none remain.
Integrator and filter states advance with the same explicit stages as the
electrical state variables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .netlist import NetlistError, parse_value

__all__ = [
    "ControlGraphError",
    "Block",
    "ControlGraph",
    "FilterDecomposition",
    "decompose_filter",
    "carrier_value",
    "evaluate_passes",
    "integrator_stage_update",
    "parse_control_section",
    "build_graph",
]

SOURCE_KINDS = {"const", "sine", "tri", "saw"}
CARRIER_KINDS = {"tri", "saw"}
STATE_KINDS = {"int", "filt"}


class ControlGraphError(ValueError):
    """Malformed control graph (bad block, unknown signal, algebraic loop)."""


@dataclass(frozen=True)
class FilterDecomposition:
    """Parallel realization of Kc (1 + s/wz) / (1 + s/wp): a direct
    feedthrough plus a first-order lag on the state path."""

    feedthrough: float  # Kc * wp / wz
    state_gain: float   # Kc * K with K = 1 - wp/wz
    pole: float         # wp
    k: float            # 1 - wp/wz

    def response(self, w: np.ndarray | float) -> np.ndarray:
        """Frequency response of the decomposed structure at w rad/s."""
        return self.feedthrough + self.state_gain / (1.0 + 1j * np.asarray(w) / self.pole)


def decompose_filter(kc: float, wz: float, wp: float) -> FilterDecomposition:
    """Split the lead/lag into feedthrough + lag so only one state remains."""
    if wz <= 0 or wp <= 0:
        raise ValueError(f"corner frequencies must be positive, got wz={wz}, wp={wp}")
    k = 1.0 - wp / wz
    return FilterDecomposition(feedthrough=kc * wp / wz, state_gain=kc * k, pole=wp, k=k)


def carrier_value(kind: str, lo: float, hi: float, f: float, t: float) -> float:
    """Instantaneous carrier value.

    Sawtooth ramps lo->hi once per period; the triangle is symmetric,
    at lo for t=0 and at hi half a period later.
    """
    if f <= 0:
        raise ValueError(f"carrier frequency must be positive, got {f}")
    phase = f * t - math.floor(f * t)
    if kind == "saw":
        return lo + (hi - lo) * phase
    if kind == "tri":
        frac = 2.0 * phase if phase < 0.5 else 2.0 * (1.0 - phase)
        return lo + (hi - lo) * frac
    raise ValueError(f"unknown carrier kind {kind!r}")


def integrator_stage_update(
    state_n: float,
    ks: Sequence[float],
    beta_row: Sequence[float],
    out_min: float = -math.inf,
    out_max: float = math.inf,
) -> float:
    """Stage value of a control state: state_n + sum_j beta[j] k[j], clamped.

    ``ks`` are the h-scaled stage derivatives accumulated so far; the clamp
    applies to the stage value only, never to the derivative.
    """
    v = state_n
    for beta, k in zip(beta_row, ks):
        v += beta * k
    return min(out_max, max(out_min, v))


@dataclass
class Block:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    params: dict = field(default_factory=dict)
    signs: tuple[float, ...] = ()      # sum only
    out_b: Optional[str] = None        # comparator complementary output

    @property
    def output(self) -> str:
        return self.name


class ControlGraph:
    """Immutable block structure with a precomputed pass schedule.

    Signal values live in plain arrays owned by the caller (the engine's
    run loop); the graph itself carries only structure and indices.
    """

    def __init__(self, blocks: Sequence[Block]):
        self.blocks = list(blocks)
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ControlGraphError(f"duplicate block name(s): {dup}")

        self.signal_names: list[str] = []
        self._sig_index: dict[str, int] = {}

        def sig(name: str) -> int:
            if name not in self._sig_index:
                self._sig_index[name] = len(self.signal_names)
                self.signal_names.append(name)
            return self._sig_index[name]

        produced: set[str] = set()
        for b in self.blocks:
            sig(b.name)
            produced.add(b.name)
            if b.out_b:
                sig(b.out_b)
                if b.out_b in produced or b.out_b in names:
                    raise ControlGraphError(f"duplicate output signal {b.out_b!r}")
                produced.add(b.out_b)
        for b in self.blocks:
            for name in b.inputs:
                sig(name)

        self.external_inputs = [n for n in self.signal_names if n not in produced]
        self.state_blocks = [b for b in self.blocks if b.kind in STATE_KINDS]
        self.state_index = {b.name: i for i, b in enumerate(self.state_blocks)}
        self.carriers = [b for b in self.blocks if b.kind in CARRIER_KINDS]

        self._validate()
        self.passes = self._schedule()
        self.order = [b for p in self.passes for b in p]

        self._limits_lo, self._limits_hi = self._compute_limits()
        self._compiled = self._compile()
        self._state_prog = []
        for b in self.state_blocks:
            col = self._sig_index[b.inputs[0]]
            if b.kind == "int":
                self._state_prog.append((False, b.params.get("gain", 1.0), 0.0, col))
            else:
                d = b.params["_decomp"]
                self._state_prog.append((True, d.k, d.pole, col))

    @property
    def n_signals(self) -> int:
        return len(self.signal_names)

    @property
    def n_states(self) -> int:
        return len(self.state_blocks)

    def signal_id(self, name: str) -> int:
        try:
            return self._sig_index[name]
        except KeyError:
            raise ControlGraphError(f"unknown control signal {name!r}") from None

    def initial_states(self) -> np.ndarray:
        return np.zeros(self.n_states)

    def _compute_limits(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.full(self.n_states, -math.inf)
        hi = np.full(self.n_states, math.inf)
        for i, b in enumerate(self.state_blocks):
            if b.kind == "int":
                lo[i] = b.params.get("min", -math.inf)
                hi[i] = b.params.get("max", math.inf)
        return lo, hi

    def state_limits(self) -> tuple[np.ndarray, np.ndarray]:
        return self._limits_lo, self._limits_hi

    def _compile(self) -> list[tuple]:
        """Flat evaluation program: (opcode, output id, operands)."""
        prog: list[tuple] = []
        sig = self._sig_index
        for b in self.blocks:
            out = sig[b.name]
            if b.kind == "const":
                prog.append(("const", out, b.params["v"]))
            elif b.kind == "sine":
                prog.append(("sine", out, (b.params["im"],
                                           2.0 * math.pi * b.params["f"],
                                           b.params.get("phase", 0.0))))
            elif b.kind in CARRIER_KINDS:
                prog.append((b.kind, out,
                             (b.params["min"], b.params["max"], b.params["f"])))
            elif b.kind == "int":
                prog.append(("state", out, self.state_index[b.name]))
        for b in self.order:
            out = sig[b.name]
            if b.kind == "sum":
                ops = tuple((sgn, sig[name]) for sgn, name in zip(b.signs, b.inputs))
                prog.append(("sum", out, ops))
            elif b.kind == "gain":
                prog.append(("gain", out, (b.params["k"], sig[b.inputs[0]])))
            elif b.kind == "comp":
                out_b = sig[b.out_b] if b.out_b else None
                prog.append(("comp", out,
                             (sig[b.inputs[0]], sig[b.inputs[1]], out_b)))
            elif b.kind == "filt":
                d = b.params["_decomp"]
                prog.append(("filt", out,
                             (d.feedthrough, b.params["kc"],
                              sig[b.inputs[0]], self.state_index[b.name])))
        return prog

    def _validate(self) -> None:
        for b in self.blocks:
            n_in = len(b.inputs)
            if b.kind in SOURCE_KINDS and n_in:
                raise ControlGraphError(f"{b.name}: source block takes no inputs")
            if b.kind in ("gain", "int", "filt") and n_in != 1:
                raise ControlGraphError(f"{b.name}: {b.kind} takes exactly one input")
            if b.kind == "comp" and n_in != 2:
                raise ControlGraphError(f"{b.name}: comp takes exactly two inputs")
            if b.kind == "sum" and n_in < 1:
                raise ControlGraphError(f"{b.name}: sum needs at least one input")
            if b.kind == "int":
                lo = b.params.get("min", -math.inf)
                hi = b.params.get("max", math.inf)
                if not lo < hi:
                    raise ControlGraphError(f"{b.name}: integrator needs min < max")
            if b.kind == "filt":
                b.params.setdefault("_decomp", decompose_filter(
                    b.params["kc"], b.params["wz"], b.params["wp"]))
            if b.kind not in SOURCE_KINDS | STATE_KINDS | {"sum", "gain", "comp"}:
                raise ControlGraphError(f"{b.name}: unknown block kind {b.kind!r}")

    def _schedule(self) -> list[list[Block]]:
        """Pass schedule: sources and integrator outputs are fresh at the
        start; each pass fires every block whose inputs are all fresh."""
        fresh: set[str] = set(self.external_inputs)
        remaining: list[Block] = []
        for b in self.blocks:
            # integrator output is its (already advanced) state
            if b.kind in SOURCE_KINDS or b.kind == "int":
                fresh.add(b.name)
                if b.out_b:
                    fresh.add(b.out_b)
            else:
                remaining.append(b)
        passes: list[list[Block]] = []
        while remaining:
            ready = [b for b in remaining if all(i in fresh for i in b.inputs)]
            if not ready:
                cyc = ", ".join(b.name for b in remaining)
                raise ControlGraphError(f"algebraic loop among control blocks: {cyc}")
            ready_ids = {id(b) for b in ready}
            for b in ready:
                fresh.add(b.name)
                if b.out_b:
                    fresh.add(b.out_b)
            remaining = [b for b in remaining if id(b) not in ready_ids]
            passes.append(ready)
        return passes

    def state_derivatives(self, signals: np.ndarray, states: np.ndarray) -> np.ndarray:
        """d(state)/dt for every integrator and filter given fresh signals."""
        derivs = np.empty(self.n_states)
        for i, (is_lag, gain, pole, col) in enumerate(self._state_prog):
            if is_lag:
                derivs[i] = pole * (gain * signals[col] - states[i])
            else:
                derivs[i] = gain * signals[col]
        return derivs


def evaluate_passes(
    graph: ControlGraph,
    t: float,
    feedback: dict[str, float],
    states: np.ndarray,
    signals_out: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Evaluate every block once for time t and return the signal table.

    ``feedback`` supplies the electrical measurement signals; integrator
    and filter states must already be advanced to this stage.  Comparators
    use strict inequality, so equal inputs give 0.
    """
    sig = graph._sig_index
    s = signals_out if signals_out is not None else np.zeros(graph.n_signals)
    for name, value in feedback.items():
        col = sig.get(name)
        if col is not None:
            s[col] = value
    sin = math.sin
    for op, out, aux in graph._compiled:
        if op == "sum":
            acc = 0.0
            for sgn, col in aux:
                acc += sgn * s[col]
            s[out] = acc
        elif op == "gain":
            s[out] = aux[0] * s[aux[1]]
        elif op == "comp":
            v = 1.0 if s[aux[0]] > s[aux[1]] else 0.0
            s[out] = v
            if aux[2] is not None:
                s[aux[2]] = 1.0 - v
        elif op == "filt":
            s[out] = aux[0] * s[aux[2]] + aux[1] * states[aux[3]]
        elif op == "const":
            s[out] = aux
        elif op == "sine":
            s[out] = aux[0] * sin(aux[1] * t + aux[2])
        elif op == "state":
            s[out] = states[aux]
        else:
            s[out] = carrier_value(op, aux[0], aux[1], aux[2], t)
    return s


_BLOCK_PARAMS = {
    "const": ({"v"}, set()),
    "sine": ({"im", "f"}, {"phase"}),
    "tri": ({"min", "max", "f"}, set()),
    "saw": ({"min", "max", "f"}, set()),
    "sum": (set(), set()),
    "gain": ({"k"}, set()),
    "comp": (set(), set()),
    "int": (set(), {"gain", "min", "max"}),
    "filt": ({"kc", "wz", "wp"}, set()),
}


def parse_control_section(lines: list[tuple[int, str]]) -> ControlGraph:
    """Build the graph from pre-split ``[control]`` section lines."""
    blocks: list[Block] = []
    for line_no, line in lines:
        tokens = line.split()
        if len(tokens) < 2:
            raise NetlistError("expected 'name kind ...'", line_no)
        name, kind = tokens[0], tokens[1].lower()
        if kind not in _BLOCK_PARAMS:
            raise NetlistError(f"unknown control block kind {kind!r}", line_no)
        required, optional = _BLOCK_PARAMS[kind]
        inputs: list[str] = []
        signs: list[float] = []
        params: dict = {}
        out_b = None
        for tok in tokens[2:]:
            if "=" in tok:
                key, _, val = tok.partition("=")
                key = key.lower()
                if kind == "comp" and key == "outb":
                    out_b = val
                    continue
                if key not in required | optional:
                    raise NetlistError(
                        f"{kind} got unexpected parameter {key!r}", line_no
                    )
                try:
                    params[key] = parse_value(val)
                except ValueError as exc:
                    raise NetlistError(str(exc), line_no) from None
            else:
                if tok.startswith("-"):
                    signs.append(-1.0)
                    inputs.append(tok[1:])
                elif tok.startswith("+"):
                    signs.append(1.0)
                    inputs.append(tok[1:])
                else:
                    signs.append(1.0)
                    inputs.append(tok)
        missing = required - params.keys()
        if missing:
            raise NetlistError(f"{kind} missing parameter(s): {sorted(missing)}", line_no)
        block = Block(
            name=name,
            kind=kind,
            inputs=tuple(inputs),
            params=params,
            signs=tuple(signs),
            out_b=out_b,
        )
        if kind == "filt":
            block.params["_decomp"] = decompose_filter(
                params["kc"], params["wz"], params["wp"]
            )
        blocks.append(block)
    try:
        return ControlGraph(blocks)
    except ControlGraphError as exc:
        raise NetlistError(str(exc)) from exc


def build_graph(blocks: Sequence[Block]) -> ControlGraph:
    """Programmatic construction; attaches filter decompositions."""
    for b in blocks:
        if b.kind == "filt" and "_decomp" not in b.params:
            b.params["_decomp"] = decompose_filter(
                b.params["kc"], b.params["wz"], b.params["wp"]
            )
    return ControlGraph(blocks)
