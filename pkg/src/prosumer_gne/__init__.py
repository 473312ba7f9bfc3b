"""
Decentralized GNE seeking for a prosumer energy market with grid coupling
constraints and an individual-rationality gate on the coupling prices.
"""

from .algorithms import (CentralSolution, ConvergenceTrace, IterateState, StepError,
                         StoppingRule, admm_step, centralized_reference, pfb_step, run)
from .economics import Tariff, community_surplus, compute_alpha, energy_cost, ir_gate
from .game import game_map, kkt_residual, monotonicity_probe, sigma, value_functions
from .harness import ExperimentConfig, generate_scenario, run_experiment
from .model import BatteryParams, CouplingConstraints, ProsumerConfig, Scenario, TimeGrid
from .qp import QpProblem, QpSolution, solve_qp

__version__ = "0.1.0"
