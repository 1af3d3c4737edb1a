"""Simulation and Bayesian inference for hidden Markov individual-level
epidemic models (coupled SIR chains with partial detection)."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    Beta,
    DiseaseState,
    InverseUniform,
    KernelSpec,
    KernelVariant,
    ModelParams,
    ModelSpec,
    Normal,
    ObservationModel,
    ShiftedGamma,
    StateConstraints,
    Uniform,
    infection_probability,
    initial_state_distribution,
    kernel_effect,
    log_joint,
    log_prior,
    obs_log_density,
    transition_matrix,
    transition_prob,
)
from .population import Population, build_grid, complete_graph, queen_neighbors, reverse_index  # noqa: F401
from .simulate import SimConfig, simulate_outbreak  # noqa: F401
