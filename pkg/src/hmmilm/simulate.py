"""Forward simulation of outbreaks and their detection records.

States update synchronously: every transition into time t conditions on
the full state vector at t-1, matching the model's Markov structure.
RNG draws follow a fixed order (per time step: one state draw then one
observation draw per individual, ascending id), so a seeded run is
bit-reproducible regardless of worker counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import EngineContext, _pressures_from_column
from .errors import InputError
from .model import (
    KernelSpec,
    ModelParams,
    ModelSpec,
    ObservationModel,
    StateConstraints,
)
from .population import Population
from .util import rng_for


@dataclass
class SimConfig:
    """A fully specified generative model plus horizon and seed."""

    population: Population
    kernel: KernelSpec
    observation: ObservationModel
    params: ModelParams
    initial: np.ndarray
    T: int
    seed: int = 0
    covariates: np.ndarray | None = None

    def model_spec(self, priors: dict | None = None,
                   constraints: StateConstraints | None = None,
                   fixed: dict | None = None) -> ModelSpec:
        """The matching inference spec (e.g. for a correctly specified fit)."""
        return ModelSpec(
            kernel=self.kernel,
            observation=self.observation,
            priors=priors or {},
            initial=self.initial,
            constraints=constraints or StateConstraints(),
            covariates=self.covariates,
            fixed=fixed or {},
        )


def simulate_outbreak(cfg: SimConfig, rng: np.random.Generator | None = None):
    """Draw (states, detections) from the generative model.

    Returns an N x (T+1) state matrix (monotone 1->2->3 rows) and the
    matching binary detection matrix with y[:, 0] = 0.
    """
    if cfg.T < 1:
        raise InputError("horizon T must be >= 1")
    n = cfg.population.n
    initial = np.asarray(cfg.initial, dtype=float)
    if initial.shape != (n, 3):
        raise InputError("initial distribution must be (N, 3)")
    if np.any(initial < 0) or not np.allclose(initial.sum(axis=1), 1.0):
        raise InputError("initial distributions must be probability triples")
    spec = cfg.model_spec()
    ctx = EngineContext(cfg.population, spec, cfg.T)
    sc = ctx.unpack(cfg.params)
    edge_g = sc.gtab[ctx.desc_idx] if ctx.desc_idx.size else np.zeros(0)

    rng = rng or rng_for(cfg.seed)
    u0 = rng.random(n)
    u = rng.random((cfg.T, n, 2))

    states = np.zeros((n, cfg.T + 1), dtype=np.int8)
    cdf = np.cumsum(initial, axis=1)
    states[:, 0] = 1 + (u0 >= cdf[:, 0]) + (u0 >= cdf[:, 1])

    y = np.zeros((n, cfg.T + 1), dtype=np.int8)
    detected_before = np.zeros(n, dtype=bool)
    p_rem = 1.0 / cfg.params.m
    pressures = np.zeros(n)
    obs = cfg.observation

    for t in range(1, cfg.T + 1):
        prev = states[:, t - 1]
        _pressures_from_column(prev, ctx.indptr, ctx.indices, edge_g, pressures)
        p12 = -np.expm1(-(cfg.params.alpha + ctx.tf[t - 1] * pressures))
        new = prev.copy()
        sus = prev == 1
        inf = prev == 2
        new[sus & (u[t - 1, :, 0] < p12)] = 2
        new[inf & (u[t - 1, :, 0] < p_rem)] = 3
        states[:, t] = new

        infectious = new == 2
        if obs is ObservationModel.SINGLE_DETECTION:
            p_det = np.where(infectious & ~detected_before, cfg.params.theta, 0.0)
        elif obs is ObservationModel.CONTINUOUS_TESTING:
            p_det = np.where(infectious, cfg.params.theta, 0.0)
        elif obs is ObservationModel.KNOWN_INFECTION:
            p_det = np.where(infectious & ~detected_before, 1.0, 0.0)
        else:  # known removal times
            p_det = np.where((new == 3) & ~detected_before, 1.0, 0.0)
        hits = u[t - 1, :, 1] < p_det
        y[hits, t] = 1
        detected_before |= hits
    return states, y


def detection_times(y: np.ndarray) -> dict[int, int]:
    """First (usually only) detection time per detected individual."""
    times = {}
    for i, row in enumerate(np.asarray(y)):
        hit = np.flatnonzero(row)
        if hit.size:
            times[i] = int(hit[0])
    return times


@dataclass
class SimStudyTruth:
    """Truth bundle used by recovery studies: simulation config plus the
    list of parameters whose recovery is scored."""

    cfg: SimConfig
    names: list[str] = field(default_factory=list)

    def true_values(self) -> dict[str, float]:
        vec = self.cfg.params.as_vector()
        all_names = ModelParams.names(len(self.cfg.params.beta))
        return {name: float(v) for name, v in zip(all_names, vec) if name in self.names}
