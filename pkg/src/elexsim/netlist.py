"""Circuit data model and text-netlist parser.

The netlist is line oriented: one element per line, ``#`` comments and blank
lines ignored.  An optional ``[control]`` section (parsed by
:mod:`elexsim.control`) follows the electrical elements.

Electrical element lines have the form ``name kind node_a node_b key=value...``:

    ========  =============================================  ================
    kind      parameters                                     element
    ========  =============================================  ================
    vdc       v=<V>                                          dc voltage source
    vsin      vm=<V> f=<Hz> [phase=<rad>]                    sine voltage source
    r         r=<ohm>                                        resistor
    c         c=<F> [r1=<ohm>] [ic=<V>]                      capacitor
    l         l=<H> [rp=<ohm>] [ic=<A>]                      inductor
    d         [von=<V>]                                      ideal diode
    sw        gate=<signal>                                  controlled switch
    am        out=<signal>                                   ammeter
    vm        out=<signal>                                   voltmeter
    ========  =============================================  ================

Node ``0`` is the reference (ground) node.  Numeric values accept the SI
suffixes p, n, u, m, k, meg (case-insensitive).

A capacitor declared with ``r1=`` expands into the capacitor plus a small
series resistor through an internal node; the internal node is named after
its dense index so that, e.g., the classic rectifier netlist yields nodes
1, 2, 3.  An inductor's ``rp=`` is kept on the element itself (the parallel
resistance is folded into the inductor's equation, not a separate branch).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

__all__ = [
    "NetlistError",
    "Element",
    "VSourceDC",
    "VSourceSine",
    "Resistor",
    "Capacitor",
    "Inductor",
    "Diode",
    "Switch",
    "Ammeter",
    "Voltmeter",
    "StateVar",
    "Circuit",
    "parse_value",
    "format_value",
    "parse_netlist",
    "split_sections",
    "serialize_netlist",
    "validate_circuit",
]


class NetlistError(ValueError):
    """Raised for malformed or inconsistent netlist input."""

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


_SI_SUFFIXES = {
    "p": 1e-12,
    "n": 1e-9,
    "u": 1e-6,
    "m": 1e-3,
    "k": 1e3,
    "meg": 1e6,
}

_VALUE_RE = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)([a-zA-Z]*)$")


def parse_value(text: str) -> float:
    """Parse a number with an optional SI suffix (p, n, u, m, k, meg)."""
    m = _VALUE_RE.match(text.strip())
    if not m:
        raise ValueError(f"bad numeric value {text!r}")
    num, suffix = m.groups()
    value = float(num)
    if suffix:
        try:
            value *= _SI_SUFFIXES[suffix.lower()]
        except KeyError:
            raise ValueError(f"unknown SI suffix {suffix!r} in {text!r}") from None
    return value


def format_value(value: float) -> str:
    """Render a float so that :func:`parse_value` recovers it exactly."""
    return repr(float(value))


@dataclass
class Element:
    """Common two-terminal element base; ``a``/``b`` are dense node indices."""

    name: str
    a: int
    b: int

    kind = "?"

    def params(self) -> dict:
        return {}


@dataclass
class VSourceDC(Element):
    v: float = 0.0
    kind = "vdc"

    def params(self):
        return {"v": self.v}


@dataclass
class VSourceSine(Element):
    vm: float = 0.0
    f: float = 0.0
    phase: float = 0.0
    kind = "vsin"

    def params(self):
        p = {"vm": self.vm, "f": self.f}
        if self.phase:
            p["phase"] = self.phase
        return p


@dataclass
class Resistor(Element):
    r: float = 0.0
    # set when this resistor was synthesized from a capacitor's r1=
    auto_of: Optional[str] = None
    kind = "r"

    def params(self):
        return {"r": self.r}


@dataclass
class Capacitor(Element):
    c: float = 0.0
    r1: Optional[float] = None
    ic: float = 0.0
    kind = "c"

    def params(self):
        p = {"c": self.c}
        if self.r1 is not None:
            p["r1"] = self.r1
        if self.ic:
            p["ic"] = self.ic
        return p


@dataclass
class Inductor(Element):
    l: float = 0.0
    rp: Optional[float] = None
    ic: float = 0.0
    kind = "l"

    def params(self):
        p = {"l": self.l}
        if self.rp is not None:
            p["rp"] = self.rp
        if self.ic:
            p["ic"] = self.ic
        return p


@dataclass
class Diode(Element):
    von: float = 0.0
    kind = "d"

    def params(self):
        return {"von": self.von} if self.von else {}


@dataclass
class Switch(Element):
    gate: str = ""
    kind = "sw"

    def params(self):
        return {"gate": self.gate}


@dataclass
class Ammeter(Element):
    out: str = ""
    kind = "am"

    def params(self):
        return {"out": self.out}


@dataclass
class Voltmeter(Element):
    out: str = ""
    kind = "vm"

    def params(self):
        return {"out": self.out}


@dataclass
class StateVar:
    """One ODE state: a capacitor voltage or an inductor current."""

    elem_index: int
    kind: str  # "cap" | "ind"
    initial: float


@dataclass
class Circuit:
    """Parsed circuit: dense node set, element list, and unknown layout.

    Unknown ordering is deterministic: node voltages for nodes 1..N-1
    (ascending dense index), then one branch current per element in
    declaration order, with each meter's feedback variable immediately
    after its branch current.
    """

    node_names: list[str]
    elements: list[Element]
    switch_indices: list[int] = field(default_factory=list)
    states: list[StateVar] = field(default_factory=list)
    # layout (filled by _finalize)
    n_unknowns: int = 0
    current_col: list[int] = field(default_factory=list)
    fb_col: dict[int, int] = field(default_factory=dict)
    unknown_labels: list[str] = field(default_factory=list)
    source_indices: list[int] = field(default_factory=list)
    meter_indices: list[int] = field(default_factory=list)

    @property
    def n_nodes(self) -> int:
        return len(self.node_names)

    @property
    def nv(self) -> int:
        """Number of node-voltage unknowns (all nodes except ground)."""
        return len(self.node_names) - 1

    @property
    def n_switches(self) -> int:
        return len(self.switch_indices)

    def _finalize(self) -> "Circuit":
        labels = [f"V({name})" for name in self.node_names[1:]]
        self.current_col = []
        self.fb_col = {}
        self.switch_indices = []
        self.states = []
        self.source_indices = []
        self.meter_indices = []
        col = self.nv
        for idx, e in enumerate(self.elements):
            self.current_col.append(col)
            labels.append(f"i({e.name})")
            col += 1
            if isinstance(e, (Ammeter, Voltmeter)):
                self.fb_col[idx] = col
                labels.append(e.out)
                col += 1
                self.meter_indices.append(idx)
            if isinstance(e, (Diode, Switch)):
                self.switch_indices.append(idx)
            if isinstance(e, Capacitor):
                self.states.append(StateVar(idx, "cap", e.ic))
            elif isinstance(e, Inductor):
                self.states.append(StateVar(idx, "ind", e.ic))
            if isinstance(e, (VSourceDC, VSourceSine)):
                self.source_indices.append(idx)
        self.n_unknowns = col
        self.unknown_labels = labels
        return self

    # -- convenience lookups -------------------------------------------------

    def node_index(self, name: str) -> int:
        return self.node_names.index(name)

    def element(self, name: str) -> Element:
        for e in self.elements:
            if e.name == name:
                return e
        raise KeyError(name)

    def element_index(self, name: str) -> int:
        for i, e in enumerate(self.elements):
            if e.name == name:
                return i
        raise KeyError(name)

    def vcol(self, node: int) -> int:
        """Column of a node's voltage in x, or -1 for ground."""
        return node - 1

    def source_values(self, t: float) -> np.ndarray:
        vals = np.empty(len(self.source_indices))
        for k, idx in enumerate(self.source_indices):
            e = self.elements[idx]
            if isinstance(e, VSourceDC):
                vals[k] = e.v
            else:
                vals[k] = e.vm * math.sin(2.0 * math.pi * e.f * t + e.phase)
        return vals

    def initial_states(self) -> np.ndarray:
        return np.array([s.initial for s in self.states], dtype=float)

    def gate_signals(self) -> list[str]:
        return [
            self.elements[i].gate
            for i in self.switch_indices
            if isinstance(self.elements[i], Switch)
        ]

    def feedback_signals(self) -> list[str]:
        return [self.elements[i].out for i in self.meter_indices]


_KIND_PARSERS = {}


def _register(kind, required, optional):
    _KIND_PARSERS[kind] = (required, optional)


_register("vdc", {"v"}, set())
_register("vsin", {"vm", "f"}, {"phase"})
_register("r", {"r"}, set())
_register("c", {"c"}, {"r1", "ic"})
_register("l", {"l"}, {"rp", "ic"})
_register("d", set(), {"von"})
_register("sw", {"gate"}, set())
_register("am", {"out"}, set())
_register("vm", {"out"}, set())

_STRING_PARAMS = {"gate", "out"}


def split_sections(text: str) -> tuple[list[tuple[int, str]], list[tuple[int, str]]]:
    """Split netlist text into (electrical, control) lines with line numbers."""
    electrical: list[tuple[int, str]] = []
    control: list[tuple[int, str]] = []
    in_control = False
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.lower() == "[control]":
            in_control = True
            continue
        (control if in_control else electrical).append((no, line))
    return electrical, control


def _parse_params(tokens: list[str], line_no: int) -> dict:
    params = {}
    for tok in tokens:
        if "=" not in tok:
            raise NetlistError(f"expected key=value, got {tok!r}", line_no)
        key, _, val = tok.partition("=")
        key = key.lower()
        if key in _STRING_PARAMS:
            params[key] = val
        else:
            try:
                params[key] = parse_value(val)
            except ValueError as exc:
                raise NetlistError(str(exc), line_no) from None
    return params


def parse_netlist(text: str) -> Circuit:
    """Parse netlist text into a validated :class:`Circuit`.

    Raises :class:`NetlistError` (with line number where applicable) on
    syntax errors, unknown element kinds, a missing ground node, or a
    dangling node referenced by a single non-voltmeter terminal.
    """
    electrical, _ = split_sections(text)

    node_ids: dict[str, int] = {"0": 0}
    node_names: list[str] = ["0"]

    def node(name: str) -> int:
        if name not in node_ids:
            node_ids[name] = len(node_names)
            node_names.append(name)
        return node_ids[name]

    raw_elements: list[Element] = []
    names_seen: set[str] = set()

    for line_no, line in electrical:
        tokens = line.split()
        if len(tokens) < 4:
            raise NetlistError("expected 'name kind node node [key=value...]'", line_no)
        name, kind = tokens[0], tokens[1].lower()
        if name in names_seen:
            raise NetlistError(f"duplicate element name {name!r}", line_no)
        names_seen.add(name)
        if kind not in _KIND_PARSERS:
            raise NetlistError(f"unknown element kind {kind!r}", line_no)
        a, b = node(tokens[2]), node(tokens[3])
        params = _parse_params(tokens[4:], line_no)
        required, optional = _KIND_PARSERS[kind]
        missing = required - params.keys()
        if missing:
            raise NetlistError(f"{kind} missing parameter(s): {sorted(missing)}", line_no)
        unknown = params.keys() - required - optional
        if unknown:
            raise NetlistError(f"{kind} got unexpected parameter(s): {sorted(unknown)}", line_no)

        if kind == "vdc":
            elem = VSourceDC(name, a, b, v=params["v"])
        elif kind == "vsin":
            elem = VSourceSine(name, a, b, vm=params["vm"], f=params["f"],
                               phase=params.get("phase", 0.0))
            if elem.f <= 0:
                raise NetlistError("vsin requires f > 0", line_no)
        elif kind == "r":
            elem = Resistor(name, a, b, r=params["r"])
            if elem.r <= 0:
                raise NetlistError("resistor requires r > 0", line_no)
        elif kind == "c":
            elem = Capacitor(name, a, b, c=params["c"], r1=params.get("r1"),
                             ic=params.get("ic", 0.0))
            if elem.c <= 0:
                raise NetlistError("capacitor requires c > 0", line_no)
            if elem.r1 is not None and elem.r1 <= 0:
                raise NetlistError("capacitor r1 must be > 0", line_no)
        elif kind == "l":
            elem = Inductor(name, a, b, l=params["l"], rp=params.get("rp"),
                            ic=params.get("ic", 0.0))
            if elem.l <= 0:
                raise NetlistError("inductor requires l > 0", line_no)
            if elem.rp is not None and elem.rp <= 0:
                raise NetlistError("inductor rp must be > 0", line_no)
        elif kind == "d":
            elem = Diode(name, a, b, von=params.get("von", 0.0))
            if elem.von < 0:
                raise NetlistError("diode von must be >= 0", line_no)
        elif kind == "sw":
            elem = Switch(name, a, b, gate=params["gate"])
        elif kind == "am":
            elem = Ammeter(name, a, b, out=params["out"])
        else:
            elem = Voltmeter(name, a, b, out=params["out"])
        raw_elements.append(elem)

    ground_referenced = any(e.a == 0 or e.b == 0 for e in raw_elements)
    if not ground_referenced:
        raise NetlistError("missing ground node (no element connects to node 0)")

    # expand capacitors with a series r1 through an internal node
    elements: list[Element] = []
    for e in raw_elements:
        if isinstance(e, Capacitor) and e.r1 is not None:
            internal = len(node_names)
            internal_name = str(internal)
            if internal_name in node_ids:
                internal_name = f"{e.name}#int"
            node_ids[internal_name] = internal
            node_names.append(internal_name)
            elements.append(replace(e, b=internal))
            elements.append(Resistor(f"{e.name}#r1", internal, e.b, r=e.r1, auto_of=e.name))
        else:
            elements.append(e)

    # dangling-node check: referenced exactly once, and not by a voltmeter
    refs: dict[int, list[Element]] = {}
    for e in elements:
        refs.setdefault(e.a, []).append(e)
        refs.setdefault(e.b, []).append(e)
    for n, touching in refs.items():
        if n != 0 and len(touching) == 1 and not isinstance(touching[0], Voltmeter):
            raise NetlistError(
                f"dangling node {node_names[n]!r} (referenced only by {touching[0].name!r})"
            )

    circuit = Circuit(node_names=node_names, elements=elements)
    return circuit._finalize()


def serialize_netlist(circuit: Circuit) -> str:
    """Render a circuit back to netlist text.

    Auto-expanded r1 resistors are folded back into their capacitor's
    ``r1=`` parameter, so parse -> serialize -> parse round-trips to an
    identical circuit.
    """
    auto = {e.auto_of: e for e in circuit.elements
            if isinstance(e, Resistor) and e.auto_of is not None}
    lines = []
    for e in circuit.elements:
        if isinstance(e, Resistor) and e.auto_of is not None:
            continue
        if isinstance(e, Capacitor) and e.name in auto:
            r1 = auto[e.name]
            b_name = circuit.node_names[r1.b]
            params = e.params()
            params["r1"] = r1.r
        else:
            b_name = circuit.node_names[e.b]
            params = e.params()
        a_name = circuit.node_names[e.a]
        parts = [e.name, e.kind, a_name, b_name]
        for key, val in params.items():
            if key in _STRING_PARAMS:
                parts.append(f"{key}={val}")
            else:
                parts.append(f"{key}={format_value(val)}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def _connected(adjacency: dict[int, set[int]], start: int, goal: int) -> bool:
    seen = {start}
    stack = [start]
    while stack:
        n = stack.pop()
        if n == goal:
            return True
        for m in adjacency.get(n, ()):
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return False


def validate_circuit(circuit: Circuit) -> list[str]:
    """Topology lint returning warnings (never raises).

    Two structural singularity risks are flagged:

    * a capacitor without series r1 closing a rigid loop of sources,
      closed switches/diodes, ammeters and other bare capacitors (the
      voltage around such a loop is overdetermined);
    * an inductor whose current path can be fully opened by switches and
      diodes while it has no parallel rp (no path for the known current).
    """
    warnings: list[str] = []

    # rigid edges: elements that pin the voltage between their terminals
    rigid: list[Element] = []
    bare_caps: list[Element] = []
    for e in circuit.elements:
        if isinstance(e, (VSourceDC, VSourceSine, Ammeter, Diode, Switch)):
            rigid.append(e)
        elif isinstance(e, Capacitor):
            expanded = any(
                isinstance(r, Resistor) and r.auto_of == e.name for r in circuit.elements
            )
            if not expanded:
                bare_caps.append(e)
    for cap in bare_caps:
        adjacency: dict[int, set[int]] = {}
        for e in rigid + [c for c in bare_caps if c is not cap]:
            adjacency.setdefault(e.a, set()).add(e.b)
            adjacency.setdefault(e.b, set()).add(e.a)
        if _connected(adjacency, cap.a, cap.b):
            warnings.append(
                f"capacitor {cap.name!r} can close a source/switch loop with no "
                f"series r1; the circuit matrix may become singular"
            )

    # conducting edges with all switches/diodes open; voltmeters carry no current
    for idx, e in enumerate(circuit.elements):
        if not isinstance(e, Inductor) or e.rp is not None:
            continue
        adjacency = {}
        for j, o in enumerate(circuit.elements):
            if j == idx or isinstance(o, (Diode, Switch, Voltmeter)):
                continue
            adjacency.setdefault(o.a, set()).add(o.b)
            adjacency.setdefault(o.b, set()).add(o.a)
        if not _connected(adjacency, e.a, e.b):
            warnings.append(
                f"inductor {e.name!r} can be isolated by open switches and has no "
                f"rp; add rp= to keep the circuit matrix non-singular"
            )
    return warnings
