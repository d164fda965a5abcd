"""elexsim: transient simulation of switched power-electronic circuits with
explicit integrators and cached per-switch-configuration linear systems."""

from __future__ import annotations

from .assembly import (
    KnownInputs,
    LinearSystem,
    SwitchConfig,
    assemble,
    build_rhs,
    relaxation_injection,
)
from .control import (
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
from .engine import (
    FEHLBERG45,
    ConsistencyError,
    MatrixCache,
    RelaxationError,
    RkfTableau,
    RunStats,
    SimulationResult,
    SingularConfigurationError,
    SolverConfig,
    SolverError,
    StateSnapshot,
    adapt_step,
    consistent_solve,
    fe_step,
    relaxed_solve,
    rkf_step,
    run,
    state_derivatives,
)
from .events import (
    CrossoverPlanner,
    EventError,
    EventRecord,
    apply_turnoff_substitution,
    bisect_diode_turnoff,
    detect_sign_alternation,
    monitor_inductor_loop,
)
from .linsolve import LuFactors, SingularSystemError, lu_factor, lu_solve
from .netlist import (
    Circuit,
    NetlistError,
    parse_netlist,
    parse_value,
    serialize_netlist,
    validate_circuit,
)

__version__ = "0.1.0"


def load_netlist(text: str):
    """Parse full netlist text into (Circuit, ControlGraph | None)."""
    from .netlist import split_sections

    circuit = parse_netlist(text)
    _, control_lines = split_sections(text)
    controls = parse_control_section(control_lines) if control_lines else None
    return circuit, controls
