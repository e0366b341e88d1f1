"""Traffic-control laboratory for 1+n mixed platoons at signalized
intersections: car-following physics, platoon state-space analysis,
terminal-velocity and trajectory optimization, event-triggered
coordination, and a deterministic single-lane microsimulator.
"""

from ._backend import BACKEND
from .coordinator import (CavAgent, CavFsmState, CoordinatorConfig,
                          GreenWindow, QueueEstimate, SchedulingError,
                          SignalTiming, WorldView, adjust_for_queue,
                          effective_distance, estimate_queue,
                          partition_platoon, pcc_plus_command, select_window,
                          step_fsm)
from .equilibrium import EquilibriumSolution, solve_vstar
from .models import (FuelParams, LinearCoeffs, OvmParams, equilibrium_spacing,
                     fuel_rate, linearize, ovm_accel)
from .ocp import (AuditReport, OcpProblem, SolverOptions, TrajectoryPlan,
                  audit_plan, running_cost, solve_ocp, terminal_cost,
                  write_plan_csv)
from .platoon_dynamics import (PlatoonModel, StabilityReport, build_platoon,
                               closed_form_spectrum_n1,
                               controllability_condition,
                               follower_block_roots, is_controllable_numeric,
                               stability_report)
from .simulator import (CONTROLLERS, Arrival, RunArtifact, ScenarioConfig,
                        VehicleLog, ZoneGeometry, run_scenario,
                        safe_follow_velocity, spawn_gate_gap, spawn_process,
                        write_events_csv, write_trajectory_csv)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "OvmParams",
    "LinearCoeffs",
    "FuelParams",
    "ovm_accel",
    "equilibrium_spacing",
    "linearize",
    "fuel_rate",
    "EquilibriumSolution",
    "solve_vstar",
    "OcpProblem",
    "TrajectoryPlan",
    "AuditReport",
    "SolverOptions",
    "terminal_cost",
    "running_cost",
    "solve_ocp",
    "audit_plan",
    "write_plan_csv",
    "SignalTiming",
    "GreenWindow",
    "SchedulingError",
    "QueueEstimate",
    "CavFsmState",
    "CavAgent",
    "WorldView",
    "CoordinatorConfig",
    "select_window",
    "adjust_for_queue",
    "effective_distance",
    "estimate_queue",
    "partition_platoon",
    "step_fsm",
    "pcc_plus_command",
    "PlatoonModel",
    "StabilityReport",
    "build_platoon",
    "closed_form_spectrum_n1",
    "follower_block_roots",
    "stability_report",
    "controllability_condition",
    "is_controllable_numeric",
    "CONTROLLERS",
    "ZoneGeometry",
    "ScenarioConfig",
    "Arrival",
    "VehicleLog",
    "RunArtifact",
    "spawn_process",
    "spawn_gate_gap",
    "safe_follow_velocity",
    "run_scenario",
    "write_trajectory_csv",
    "write_events_csv",
    "__version__",
]
