"""Scheduling control for treelike multiclass many-server queueing systems.

Library layout:
  system    -- topology and parameters of the parametric model
  fluid     -- static fluid allocation and derived constants
  flows     -- tree flow map, rounding, and routing primitives
  costs     -- running-cost families
  control   -- diffusion control: HJB solve, feedback policies, SDE runs
  simulate  -- exact discrete-event simulation under pluggable policies
  harness   -- end-to-end experiment sweeps, reports, and figures
  cli       -- `treeq` command line entry points
"""

from .costs import CostSpec, constant_cost, queue_power_cost, zero_cost
from .control import (
    DriftData,
    GridConfig,
    MarkovPolicy,
    ValueField,
    choose_horizon,
    drift,
    hamiltonian,
    mollify_policy,
    simulate_controlled_diffusion,
    solve_hjb,
    verify_policy_margin,
)
from .fluid import StaticFluid, compute_alpha0, derive_fluid_quantities, solve_static_fluid
from .flows import (
    flow_gap_sides,
    flow_matrix,
    flow_norm_constant,
    round_preserving_sum,
    route_nonblocked,
    solve_flow,
)
from .simulate import CostReport, SimConfig, run_replication
from .system import InterarrivalSpec, SystemSpec, TreeIndex, ValidatedSystem, leaf_order, validate

__version__ = "0.1.0"

__all__ = [
    "CostReport",
    "CostSpec",
    "DriftData",
    "GridConfig",
    "InterarrivalSpec",
    "MarkovPolicy",
    "SimConfig",
    "StaticFluid",
    "SystemSpec",
    "TreeIndex",
    "ValidatedSystem",
    "ValueField",
    "choose_horizon",
    "compute_alpha0",
    "constant_cost",
    "derive_fluid_quantities",
    "drift",
    "flow_gap_sides",
    "flow_matrix",
    "flow_norm_constant",
    "hamiltonian",
    "leaf_order",
    "mollify_policy",
    "queue_power_cost",
    "round_preserving_sum",
    "route_nonblocked",
    "run_replication",
    "simulate_controlled_diffusion",
    "solve_flow",
    "solve_hjb",
    "solve_static_fluid",
    "validate",
    "verify_policy_margin",
    "zero_cost",
]
