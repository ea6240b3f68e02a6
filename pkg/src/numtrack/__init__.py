"""Network utility maximization over finite-state Markov fading channels.

A simulator and library for the projected primal-dual scaled-gradient
iteration tracking the moving saddle point of a multi-commodity flow /
multi-carrier power allocation problem, with measured contraction factors,
region-stability and tracking-error statistics, and constraint-outage
analysis with backoff margins.
"""

from .fsmc import (ChannelProcess, GlobalChannelState, LinkChannelChain,
                   aggregate_stay_probability, build_channel_process,
                   build_link_chain, mean_sojourn_slots, rayleigh_power_levels)
from .network import (CapacityConstraint, RoutingTable, Topology,
                      builtin_figure1, build_topology, check_rate_in_region,
                      constraint_count, enumerate_capacity_constraints)
from .problem import Layout, PrimalDualPoint, ProblemInstance
from .solver import (DistributedStepsizes, EquilibriumError, EquilibriumSolver,
                     ScalingMatrix, ScalingPolicy, SolverConfig, Trajectory,
                     compute_scaling, contraction_modulus,
                     contraction_modulus_max, default_grouping,
                     distributed_round, measured_contraction, pdsga_step,
                     run_tracking, solve_equilibrium)
from .metrics import (BoundValues, MetricsReport, bound_values, delta_estimate,
                      eae_mse, lipschitz_estimate, outage_probability,
                      region_probability)
from .scenario import (Scenario, ScenarioError, default_scenario,
                       epsilon_for_mean_sojourn, load_scenario, make_instance,
                       make_policy, make_process, validate_scenario)
from .harness import run_scenario

__version__ = "0.1.0"
