"""Solvers for nonlocal balance equations on measure spaces.

The equation ``d/dt m + div(f m) = g m`` with coefficients depending on the
current measure is solved by a lattice Markov-chain ODE and by weighted
particles (superposition); jump-process simulation cross-checks both.  An
exact PRW distance serves as a solver ingredient and as the error metric.
"""
from .measures import (STAR, AugmentedDistribution, DiscreteMeasure, TransportPlan, augment, prw,
                       prw_augmented, prw_direct, rho_star, wasserstein1)
from .problem import BalanceProblem, Box, choose_R, mass_bound, scenario, SCENARIOS

__version__ = "0.1.0"

__all__ = [
    "STAR", "AugmentedDistribution", "DiscreteMeasure", "TransportPlan", "augment", "prw",
    "prw_augmented", "prw_direct", "rho_star", "wasserstein1", "BalanceProblem", "Box", "choose_R",
    "mass_bound", "scenario", "SCENARIOS",
]
