"""Core model: disease states, transition and observation densities,
infection kernels, priors, and the complete-data log joint density.

The latent process is a coupled three-state (susceptible / infectious /
removed) Markov chain per individual.  A susceptible individual is
infected between t-1 and t with probability

    p12 = 1 - exp(-alpha - sum_{j in NE(i)} beta_{j->i,t} I[S_{j,t-1} = 2]),

the discrete-time Reed-Frost form; an infectious individual is removed
with probability 1/m.  Detections y_{it} are emitted conditional on the
state and, for the autoregressive observation models, on the detection
history of the same individual.

Everything here is pure Python/NumPy and deliberately independent of the
compiled filtering engine, so it can serve as the reference evaluator in
cross-checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from .errors import InputError, ParameterDomainError

NEG_INF = float("-inf")


class DiseaseState(IntEnum):
    SUSCEPTIBLE = 1
    INFECTIOUS = 2
    REMOVED = 3


class KernelVariant(Enum):
    """Functional forms for the pairwise disease-spread effect."""

    POWER_LAW_TAYLOR = "power_law_taylor"
    POWER_LAW_EXACT = "power_law_exact"
    NEIGHBORHOOD_ORDER = "neighborhood_order"
    LINEAR = "linear"
    QUADRATIC_CONSTRAINED = "quadratic"
    HOMOGENEOUS_WARD_CLOSURE = "homogeneous"


_KERNEL_NPARAMS = {
    KernelVariant.POWER_LAW_TAYLOR: 2,
    KernelVariant.POWER_LAW_EXACT: 2,
    KernelVariant.NEIGHBORHOOD_ORDER: 3,
    KernelVariant.LINEAR: 2,
    KernelVariant.QUADRATIC_CONSTRAINED: 3,
    KernelVariant.HOMOGENEOUS_WARD_CLOSURE: 1,
}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice plus its fixed configuration constants.

    `anchor` is the fixed expansion point of the power-law Taylor kernel
    (a configuration constant, never sampled).  `dmax`/`dmin` bound the
    linear and constrained-quadratic kernels; when left as None they are
    derived from the population's neighbor distances at model assembly.
    """

    variant: KernelVariant
    anchor: float = 1.35
    dmax: float | None = None
    dmin: float | None = None

    @property
    def n_params(self) -> int:
        return _KERNEL_NPARAMS[self.variant]

    @property
    def uses_order(self) -> bool:
        return self.variant is KernelVariant.NEIGHBORHOOD_ORDER

    @property
    def is_homogeneous(self) -> bool:
        return self.variant is KernelVariant.HOMOGENEOUS_WARD_CLOSURE

    def constraints_ok(self, beta) -> bool:
        """True when the kernel parameters satisfy the variant's domain."""
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.n_params,):
            return False
        v = self.variant
        if v is KernelVariant.POWER_LAW_EXACT:
            return beta[0] >= 0.0
        if v is KernelVariant.QUADRATIC_CONSTRAINED:
            if self.dmax is None or self.dmin is None:
                raise InputError("quadratic kernel requires dmax and dmin")
            b0, b1, b2 = beta
            return b0 > 0.0 and b1 > 0.0 and (-b1 - 2.0 * b2 * (self.dmax - self.dmin)) < 0.0
        if v is KernelVariant.LINEAR:
            if self.dmax is None:
                raise InputError("linear kernel requires dmax")
            return beta[0] >= 0.0 and beta[1] >= 0.0
        return bool(np.all(beta >= 0.0))

    def with_range(self, dmin: float, dmax: float) -> "KernelSpec":
        """Fill unset distance bounds from the population geometry."""
        return KernelSpec(
            self.variant,
            anchor=self.anchor,
            dmax=self.dmax if self.dmax is not None else dmax,
            dmin=self.dmin if self.dmin is not None else dmin,
        )


def kernel_effect(spec: KernelSpec, beta, d: float) -> float:
    """Pairwise disease-spread effect beta_{j->i} at descriptor `d`.

    `d` is a distance in meters for the distance kernels and a neighbor
    order in {1, 2, 3} for the neighborhood-order kernel.  The value is
    an infection-rate effect, not a probability, so it is not clamped to
    be below one.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (spec.n_params,):
        raise InputError(
            f"{spec.variant.value} kernel takes {spec.n_params} parameters, got {beta.shape}"
        )
    v = spec.variant
    if v is KernelVariant.HOMOGENEOUS_WARD_CLOSURE:
        if beta[0] < 0:
            raise ParameterDomainError("homogeneous effect must be >= 0")
        return float(beta[0])
    if v is KernelVariant.NEIGHBORHOOD_ORDER:
        order = int(d)
        if order != d or order not in (1, 2, 3):
            raise InputError(f"neighbor order must be in {{1,2,3}}, got {d}")
        if np.any(beta < 0):
            raise ParameterDomainError("order effects must be >= 0")
        return float(beta[order - 1])
    if d <= 0:
        raise InputError(f"distance must be positive, got {d}")
    if v is KernelVariant.POWER_LAW_TAYLOR:
        if beta[0] < 0:
            raise ParameterDomainError("power-law scale must be >= 0")
        ld = math.log(d)
        q = beta[1] - spec.anchor
        return float(beta[0] * d ** (-spec.anchor) * (1.0 - ld * q + 0.5 * ld * ld * q * q))
    if v is KernelVariant.POWER_LAW_EXACT:
        if beta[0] < 0:
            raise ParameterDomainError("power-law scale must be >= 0")
        return float(beta[0] * d ** (-beta[1]))
    if v is KernelVariant.LINEAR:
        if spec.dmax is None:
            raise InputError("linear kernel requires dmax")
        if not spec.constraints_ok(beta):
            raise ParameterDomainError("linear kernel requires nonnegative coefficients")
        return float(beta[0] + beta[1] * (spec.dmax - d))
    if v is KernelVariant.QUADRATIC_CONSTRAINED:
        if not spec.constraints_ok(beta):
            raise ParameterDomainError(
                "quadratic kernel violates positivity/decreasing constraints"
            )
        u = spec.dmax - d
        return float(beta[0] + beta[1] * u + beta[2] * u * u)
    raise InputError(f"unknown kernel variant {v}")


class ObservationModel(Enum):
    """How detections arise from the latent states.

    SINGLE_DETECTION   testing stops at the first positive: Bern(theta)
                       while infectious and not previously detected.
    CONTINUOUS_TESTING independent Bern(theta) at every infectious step.
    KNOWN_REMOVAL      the detection time is the removal time (certain
                       detection on entering the removed state).
    KNOWN_INFECTION    the detection time is the infection time (certain
                       detection on entering the infectious state).
    """

    SINGLE_DETECTION = "single_detection"
    CONTINUOUS_TESTING = "continuous_testing"
    KNOWN_REMOVAL = "known_removal"
    KNOWN_INFECTION = "known_infection"

    @property
    def has_theta(self) -> bool:
        return self in (ObservationModel.SINGLE_DETECTION, ObservationModel.CONTINUOUS_TESTING)

    @property
    def single_detection_rows(self) -> bool:
        """True when each individual can be detected at most once."""
        return self is not ObservationModel.CONTINUOUS_TESTING


def obs_log_density(
    observation: ObservationModel,
    y: int,
    state: int,
    previously_detected: bool,
    theta: float,
) -> float:
    """log p(y_it | S_it, detection history, theta).

    Impossible observations return -inf rather than raising; the filter
    consumes those zeros.
    """
    if y not in (0, 1):
        raise InputError(f"detection indicator must be 0/1, got {y}")
    if observation.has_theta and not (0.0 < theta <= 1.0):
        raise ParameterDomainError(f"theta must be in (0,1], got {theta}")
    obs = observation
    if obs is ObservationModel.SINGLE_DETECTION:
        if state == DiseaseState.INFECTIOUS and not previously_detected:
            p = theta if y == 1 else 1.0 - theta
            return math.log(p) if p > 0 else NEG_INF
        return 0.0 if y == 0 else NEG_INF
    if obs is ObservationModel.CONTINUOUS_TESTING:
        if state == DiseaseState.INFECTIOUS:
            p = theta if y == 1 else 1.0 - theta
            return math.log(p) if p > 0 else NEG_INF
        return 0.0 if y == 0 else NEG_INF
    if obs is ObservationModel.KNOWN_REMOVAL:
        if state == DiseaseState.REMOVED and not previously_detected:
            return 0.0 if y == 1 else NEG_INF
        return 0.0 if y == 0 else NEG_INF
    if obs is ObservationModel.KNOWN_INFECTION:
        if state == DiseaseState.INFECTIOUS and not previously_detected:
            return 0.0 if y == 1 else NEG_INF
        return 0.0 if y == 0 else NEG_INF
    raise InputError(f"unknown observation model {obs}")


def infection_probability(alpha: float, beta_sum: float) -> float:
    """Reed-Frost step infection probability 1 - exp(-alpha - beta_sum)."""
    if alpha < 0 or beta_sum < 0:
        raise ParameterDomainError("alpha and beta_sum must be >= 0")
    return -math.expm1(-(alpha + beta_sum))


def transition_matrix(p12: float, m: float) -> np.ndarray:
    """3x3 conditional transition matrix; rows/cols ordered S, I, R."""
    if not 0.0 <= p12 < 1.0:
        raise ParameterDomainError(f"p12 must be in [0,1), got {p12}")
    if m <= 1.0:
        raise ParameterDomainError(f"mean infectious duration m must exceed 1, got {m}")
    return np.array(
        [
            [1.0 - p12, p12, 0.0],
            [0.0, 1.0 - 1.0 / m, 1.0 / m],
            [0.0, 0.0, 1.0],
        ]
    )


def transition_prob(frm: int, to: int, p12: float, m: float) -> float:
    """One entry of the conditional transition matrix."""
    if frm not in (1, 2, 3) or to not in (1, 2, 3):
        raise InputError("states must be in {1,2,3}")
    return float(transition_matrix(p12, m)[frm - 1, to - 1])


def log_transition_prob(frm: int, to: int, rate: float, m: float) -> float:
    """Log transition density with the infection step kept in log space:
    `rate` is alpha + sum of kernel effects, so log(1 - p12) = -rate stays
    exact even where p12 rounds to 1."""
    if m <= 1.0:
        raise ParameterDomainError(f"mean infectious duration m must exceed 1, got {m}")
    if rate < 0.0:
        raise ParameterDomainError("infection rate must be >= 0")
    if frm == 1:
        if to == 1:
            return -rate
        if to == 2:
            return math.log(-math.expm1(-rate)) if rate > 0 else NEG_INF
        return NEG_INF
    if frm == 2:
        if to == 2:
            return math.log1p(-1.0 / m)
        if to == 3:
            return -math.log(m)
        return NEG_INF
    return 0.0 if to == 3 else NEG_INF


@dataclass(frozen=True)
class ModelParams:
    """Parameter vector (theta, m, alpha, beta).

    For observation models without a free detection probability
    (KNOWN_REMOVAL / KNOWN_INFECTION) theta is carried as the fixed
    value 1.0.
    """

    theta: float
    m: float
    alpha: float
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.theta, self.m, self.alpha], self.beta))

    @staticmethod
    def from_vector(vec) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        return ModelParams(float(vec[0]), float(vec[1]), float(vec[2]), vec[3:].copy())

    @staticmethod
    def names(n_beta: int) -> list[str]:
        return ["theta", "m", "alpha"] + [f"beta{k}" for k in range(n_beta)]


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def log_density(self, x: float) -> float:
        if self.lo <= x <= self.hi:
            return -math.log(self.hi - self.lo)
        return NEG_INF

    def sample(self, rng) -> float:
        return float(rng.uniform(self.lo, self.hi))

    @property
    def width_hint(self) -> float:
        return 0.1 * (self.hi - self.lo)


@dataclass(frozen=True)
class Beta:
    a: float
    b: float

    def log_density(self, x: float) -> float:
        if not 0.0 < x < 1.0:
            return NEG_INF
        lbeta = math.lgamma(self.a) + math.lgamma(self.b) - math.lgamma(self.a + self.b)
        return (self.a - 1.0) * math.log(x) + (self.b - 1.0) * math.log1p(-x) - lbeta

    def sample(self, rng) -> float:
        return float(rng.beta(self.a, self.b))

    @property
    def width_hint(self) -> float:
        return 0.1


@dataclass(frozen=True)
class ShiftedGamma:
    """Gamma(shape, rate) on x - shift; e.g. a prior on m - 1."""

    shape: float
    rate: float
    shift: float = 0.0

    def log_density(self, x: float) -> float:
        z = x - self.shift
        if z <= 0.0:
            return NEG_INF
        return (
            self.shape * math.log(self.rate)
            - math.lgamma(self.shape)
            + (self.shape - 1.0) * math.log(z)
            - self.rate * z
        )

    def sample(self, rng) -> float:
        return self.shift + float(rng.gamma(self.shape, 1.0 / self.rate))

    @property
    def width_hint(self) -> float:
        return 1.0


@dataclass(frozen=True)
class InverseUniform:
    """Density m^{-2} on m > 1, i.e. 1/m ~ Uniform(0, 1)."""

    def log_density(self, x: float) -> float:
        return -2.0 * math.log(x) if x > 1.0 else NEG_INF

    def sample(self, rng) -> float:
        return 1.0 / float(rng.uniform(0.0, 1.0))

    @property
    def width_hint(self) -> float:
        return 1.0


@dataclass(frozen=True)
class Normal:
    mu: float
    sd: float

    def log_density(self, x: float) -> float:
        z = (x - self.mu) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * math.log(2.0 * math.pi)

    def sample(self, rng) -> float:
        return float(self.mu + self.sd * rng.standard_normal())

    @property
    def width_hint(self) -> float:
        return 1.0  # unbounded support; slice widths are configurable


def log_prior(params: ModelParams, priors: dict, fixed: dict | None = None) -> float:
    """Sum of independent log prior densities over the free parameters.

    Parameters named in `fixed` are point masses and contribute nothing.
    Returns -inf outside any prior's support.
    """
    fixed = fixed or {}
    vec = params.as_vector()
    names = ModelParams.names(len(params.beta))
    total = 0.0
    for name, value in zip(names, vec):
        if name in fixed:
            continue
        prior = priors.get(name)
        if prior is None:
            continue
        lp = prior.log_density(float(value))
        if lp == NEG_INF:
            return NEG_INF
        total += lp
    return total


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateConstraints:
    """Hard state restrictions applied during inference.

    no_undetected_infections pins every undetected individual to the
    all-susceptible path; pin_detected freezes detected individuals at
    their canonical initialization path (useful for reducing the sampler
    to pure parameter MCMC).
    """

    no_undetected_infections: bool = False
    pin_detected: bool = False


@dataclass
class ModelSpec:
    """Everything needed to evaluate the model besides data and params."""

    kernel: KernelSpec
    observation: ObservationModel
    priors: dict
    initial: np.ndarray  # (N, 3) per-individual state probabilities at t=0
    constraints: StateConstraints = field(default_factory=StateConstraints)
    covariates: np.ndarray | None = None  # W_t indicator, length T+1
    fixed: dict = field(default_factory=dict)  # parameter-fixing mask

    def fixed_mask(self) -> dict:
        """Fixing mask including the implicit theta pin for deterministic
        observation models."""
        mask = dict(self.fixed)
        if not self.observation.has_theta:
            mask.setdefault("theta", 1.0)
        return mask


def initial_state_distribution(
    n: int, p_infectious: float = 0.01, overrides: dict | None = None
) -> np.ndarray:
    """Per-individual (p1, p2, p3) with p3 = 0 and p2 = p_infectious.

    `overrides` maps individual id -> infectious probability, e.g. a
    likely index case.
    """
    if not 0.0 <= p_infectious <= 1.0:
        raise InputError("p_infectious must be a probability")
    dist = np.zeros((n, 3))
    dist[:, 0] = 1.0 - p_infectious
    dist[:, 1] = p_infectious
    for i, p in (overrides or {}).items():
        if not 0 <= i < n:
            raise InputError(f"override id {i} outside population")
        dist[i, 0] = 1.0 - p
        dist[i, 1] = p
    return dist


def previously_detected(y: np.ndarray) -> np.ndarray:
    """prev[i, t] = 1 iff individual i was detected strictly before t."""
    y = np.asarray(y)
    prev = np.zeros_like(y, dtype=np.uint8)
    prev[:, 1:] = (np.cumsum(y[:, :-1], axis=1) > 0).astype(np.uint8)
    return prev


def validate_state_matrix(states: np.ndarray) -> None:
    """Enforce values in {1,2,3} and monotone 1->2->3 rows."""
    states = np.asarray(states)
    if states.ndim != 2:
        raise InputError("state matrix must be N x (T+1)")
    if not np.isin(states, (1, 2, 3)).all():
        raise InputError("states must be in {1,2,3}")
    if np.any(np.diff(states.astype(np.int64), axis=1) < 0):
        raise InputError("state paths must be monotone 1->2->3")


def validate_observation_matrix(y: np.ndarray, observation: ObservationModel) -> None:
    y = np.asarray(y)
    if y.ndim != 2:
        raise InputError("observation matrix must be N x (T+1)")
    if not np.isin(y, (0, 1)).all():
        raise InputError("detections must be binary")
    if np.any(y[:, 0] != 0):
        raise InputError("no detections can occur at t=0")
    if observation.single_detection_rows and np.any(y.sum(axis=1) > 1):
        raise InputError(
            f"{observation.value} allows at most one detection per individual"
        )


def spread_rate(
    i: int,
    states_prev: np.ndarray,
    params: ModelParams,
    spec: ModelSpec,
    population,
    t: int,
) -> float:
    """Total infection pressure on i for the transition into time t:
    sum over infectious neighbors of beta_{j->i,t}, including the
    ward-closure multiplier when covariates are present."""
    tf = 1.0
    if spec.covariates is not None:
        tf = 1.0 - float(spec.covariates[t - 1])
    total = 0.0
    for j, d in population.neighbor_descriptors(i, order=spec.kernel.uses_order):
        if states_prev[j] == DiseaseState.INFECTIOUS:
            total += kernel_effect(spec.kernel, params.beta, d)
    return tf * total


def log_joint(
    states: np.ndarray,
    y: np.ndarray,
    params: ModelParams,
    spec: ModelSpec,
    population,
) -> float:
    """Complete-data log density log p(y, S | v).

    Factorizes as sum_i [ log p(S_i0) + sum_t ( log transition + log
    observation density ) ]; -inf as soon as any factor is impossible.
    """
    states = np.asarray(states)
    y = np.asarray(y)
    n, tp1 = states.shape
    if y.shape != (n, tp1):
        raise InputError(f"states {states.shape} and detections {y.shape} disagree")
    if population.n != n:
        raise InputError(f"population size {population.n} != state rows {n}")
    if spec.initial.shape != (n, 3):
        raise InputError("initial distribution must be (N, 3)")
    if spec.covariates is not None and len(spec.covariates) != tp1:
        raise InputError("covariate series must have length T+1")
    T = tp1 - 1
    prev = previously_detected(y)

    total = 0.0
    for i in range(n):
        p0 = spec.initial[i, states[i, 0] - 1]
        if p0 <= 0.0:
            return NEG_INF
        total += math.log(p0)
    for t in range(1, T + 1):
        for i in range(n):
            rate = spread_rate(i, states[:, t - 1], params, spec, population, t)
            lt = log_transition_prob(
                states[i, t - 1], states[i, t], params.alpha + rate, params.m
            )
            if lt == NEG_INF:
                return NEG_INF
            total += lt
            lo = obs_log_density(
                spec.observation, int(y[i, t]), int(states[i, t]), bool(prev[i, t]), params.theta
            )
            if lo == NEG_INF:
                return NEG_INF
            total += lo
    return total
