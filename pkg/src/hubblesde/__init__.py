"""Stochastic Friedmann acceleration equation: Ito versus Stratonovich.

Simulation and closed-form checks for ``dH = -H^2 dt - 1.5 H^2 dW``: finite
time blow-up with probability ``exp(-8/(9 H0))`` under Stratonovich calculus,
global existence with ``H(t) t -> 1`` under Ito calculus.
"""
from hubblesde.models import CosmologyParams, OuParams
from hubblesde.passage import Barrier, Direction, DriftedBmSpec, blowup_probability
from hubblesde.paths import TimeGrid, WienerPath, generate_wiener
from hubblesde.sde import Interpretation, PathSolution, Sde1D, SolverScheme, integrate

__version__ = "0.1.0"

__all__ = [
    "Barrier",
    "CosmologyParams",
    "Direction",
    "DriftedBmSpec",
    "Interpretation",
    "OuParams",
    "PathSolution",
    "Sde1D",
    "SolverScheme",
    "TimeGrid",
    "WienerPath",
    "blowup_probability",
    "generate_wiener",
    "integrate",
]
