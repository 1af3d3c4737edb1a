"""Parameter samplers and the hybrid Gibbs loop.

One Gibbs iteration is (1) update the parameter vector against the
conditional posterior log p(y, S | v) + log p(v) with the states held
fixed, then (2) redraw every unconstrained individual's state path
exactly from its full conditional via the filtering engine.  Parameter
steps are univariate slice updates by default for theta and m, and an
automated factor slice sampler over the correlated (alpha, beta) block;
a full-vector factor slice mode is available, as is adaptive random-walk
Metropolis per parameter.

All adaptation stops at the end of burn-in.  Proposals outside the prior
support are handled by a -inf target value (rejection), never by
reflection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .diagnostics import WaicAccumulator
from .errors import ConfigError, InitializationError, InputError
from .model import (
    ModelParams,
    ModelSpec,
    NEG_INF,
    ObservationModel,
    log_joint,
    previously_detected,
)
from .util import parallel_map, seed_sequence

_PRIOR_CODE = {"Uniform": 0, "Beta": 1, "ShiftedGamma": 2, "InverseUniform": 3, "Normal": 4}


# ---------------------------------------------------------------------------
# Scalar samplers
# ---------------------------------------------------------------------------


def slice_univariate(log_target, current: float, width: float,
                     rng: np.random.Generator,
                     bounds=(-math.inf, math.inf),
                     max_stepout: int = 1000):
    """One stepping-out + shrinkage slice update (Neal 2003).

    The stepping-out interval is clipped to `bounds`.  Returns
    (new value, expansion count); the target is left invariant.
    """
    lo, hi = bounds
    lp0 = log_target(current)
    if lp0 == NEG_INF or math.isnan(lp0):
        raise InputError("slice sampler started at a zero-density point")
    log_y = lp0 + math.log(rng.random())
    u = rng.random()
    left = current - width * u
    right = left + width
    expansions = 0
    while left > lo and log_target(left) > log_y:
        left -= width
        expansions += 1
        if expansions > max_stepout:
            break
    while right < hi and log_target(right) > log_y:
        right += width
        expansions += 1
        if expansions > max_stepout:
            break
    left = max(left, lo)
    right = min(right, hi)
    while True:
        proposal = left + rng.random() * (right - left)
        if log_target(proposal) > log_y:
            return proposal, expansions
        if proposal < current:
            left = proposal
        else:
            right = proposal


@dataclass
class AfssState:
    """Adaptive state of the automated factor slice sampler.

    Directions are refreshed during burn-in from the eigendecomposition
    of the running draw covariance; interval widths are scaled toward a
    target of one stepping-out expansion per update.  After burn-in the
    state is frozen.
    """

    directions: np.ndarray
    widths: np.ndarray
    interval: int = 100
    adapting: bool = True
    scales: np.ndarray = field(default=None)
    n_draws: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)
    expansions: np.ndarray = field(default=None)
    updates: int = 0
    fallbacks: int = 0

    @staticmethod
    def create(initial_widths, interval: int = 100) -> "AfssState":
        w = np.atleast_1d(np.asarray(initial_widths, dtype=float))
        p = w.shape[0]
        return AfssState(
            directions=np.eye(p),
            widths=w.copy(),
            interval=interval,
            scales=np.full(p, 2.0),
            mean=np.zeros(p),
            m2=np.zeros((p, p)),
            expansions=np.zeros(p),
        )

    def freeze(self):
        self.adapting = False

    def adaptation_fingerprint(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(a).tobytes()
            for a in (self.directions, self.widths, self.scales, self.mean,
                      self.m2, self.expansions,
                      np.array([self.n_draws, self.updates, self.fallbacks]))
        )

    def _record(self, x):
        self.n_draws += 1
        delta = x - self.mean
        self.mean += delta / self.n_draws
        self.m2 += np.outer(delta, x - self.mean)

    def _refresh(self):
        p = self.widths.shape[0]
        rate = self.expansions / max(self.updates, 1)
        self.scales = np.clip(self.scales * np.exp(0.3 * (rate - 1.0)), 0.3, 20.0)
        if self.n_draws >= max(2 * p, 10):
            cov = self.m2 / (self.n_draws - 1)
            try:
                eigval, eigvec = np.linalg.eigh(cov)
            except np.linalg.LinAlgError:
                eigval, eigvec = None, None
            singular = (
                eigvec is None
                or not np.all(np.isfinite(eigval))
                or eigval.max() <= 0
                or eigval.min() <= 1e-12 * eigval.max()
            )
            if singular:
                self.fallbacks += 1
                self.directions = np.eye(p)
            else:
                order = np.argsort(eigval)[::-1]
                self.directions = eigvec[:, order]
                self.widths = self.scales * np.sqrt(eigval[order])
        self.expansions[:] = 0.0
        self.updates = 0


def afss_update(log_target, current, state: AfssState,
                rng: np.random.Generator) -> np.ndarray:
    """Sequential slice updates along the current factor directions.

    With a single dimension and identity directions this reduces exactly
    to `slice_univariate`.
    """
    x = np.atleast_1d(np.asarray(current, dtype=float)).copy()
    p = x.shape[0]
    for k in range(p):
        direction = state.directions[:, k]

        def line_target(s, _d=direction):
            return log_target(x + s * _d)

        step, expansions = slice_univariate(line_target, 0.0, float(state.widths[k]), rng)
        x = x + step * direction
        if state.adapting:
            state.expansions[k] += expansions
    if state.adapting:
        state.updates += 1
        state._record(x)
        if state.n_draws % state.interval == 0:
            state._refresh()
    return x


@dataclass
class RwScaleState:
    """Robbins-Monro scale adaptation for random-walk Metropolis.

    `steps`/`accepts` keep counting after the freeze (they are acceptance
    diagnostics); the adaptation state itself is log_scale/adapt_steps.
    """

    log_scale: float = 0.0
    target_rate: float = 0.44
    adapting: bool = True
    adapt_steps: int = 0
    steps: int = 0
    accepts: int = 0

    def freeze(self):
        self.adapting = False

    def adaptation_fingerprint(self) -> bytes:
        return np.array([self.log_scale, float(self.adapt_steps)]).tobytes()


def adaptive_rw_mh(log_target, current: float, state: RwScaleState,
                   rng: np.random.Generator) -> float:
    """One Gaussian random-walk Metropolis step with scale adaptation
    toward the target acceptance rate during burn-in."""
    lp0 = log_target(current)
    if lp0 == NEG_INF or math.isnan(lp0):
        raise InputError("Metropolis step started at a zero-density point")
    proposal = current + math.exp(state.log_scale) * rng.standard_normal()
    lp1 = log_target(proposal)
    accept = math.log(rng.random()) < lp1 - lp0
    state.steps += 1
    if state.adapting:
        state.adapt_steps += 1
        gain = 1.0 / state.adapt_steps ** 0.6
        state.log_scale += gain * ((1.0 if accept else 0.0) - state.target_rate)
    if accept:
        state.accepts += 1
        return proposal
    return current


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def initialize_states(y, observation: ObservationModel,
                      style: str = "canonical") -> np.ndarray:
    """Latent states consistent with the detection record.

    Undetected individuals start all-susceptible.  A detected individual
    gets the canonical path for the observation model (susceptible until
    the detection-implied infection, infectious, then removed); the
    `infectious_from_start` style instead makes detected individuals
    infectious from t=0, which stays valid when there is no background
    infection risk to explain a later infection.
    """
    y = np.asarray(y)
    n, tp1 = y.shape
    states = np.ones((n, tp1), dtype=np.int8)
    for i in range(n):
        hits = np.flatnonzero(y[i])
        if hits.size == 0:
            continue
        k_first, k_last = int(hits[0]), int(hits[-1])
        if observation is ObservationModel.CONTINUOUS_TESTING:
            start = 0 if style == "infectious_from_start" else k_first
            states[i, start: k_last + 1] = 2
            states[i, k_last + 1:] = 3
        elif observation is ObservationModel.KNOWN_REMOVAL:
            start = 0 if style == "infectious_from_start" else max(k_first - 1, 0)
            states[i, start: k_first] = 2
            states[i, k_first:] = 3
        else:  # single detection / known infection times
            start = 0 if style == "infectious_from_start" else k_first
            if observation is ObservationModel.KNOWN_INFECTION:
                start = k_first  # infection time is observed; no freedom
            states[i, start: k_first + 1] = 2
            states[i, k_first + 1:] = 3
    return states


def frozen_mask(y, spec: ModelSpec) -> np.ndarray:
    """Individuals whose paths are pinned and skipped by the sweep."""
    y = np.asarray(y)
    detected = y.sum(axis=1) > 0
    frozen = np.zeros(y.shape[0], dtype=np.uint8)
    if spec.constraints.no_undetected_infections:
        frozen[~detected] = 1
    if spec.constraints.pin_detected:
        frozen[detected] = 1
    return frozen


def initialize_params(spec: ModelSpec, rng: np.random.Generator,
                      n_beta: int) -> ModelParams:
    """Random parameter start with finite log prior, honoring the fixing
    mask and kernel constraints."""
    fixed = spec.fixed_mask()
    names = ModelParams.names(n_beta)
    for attempt in range(1000):
        values = []
        for name in names:
            if name in fixed:
                values.append(float(fixed[name]))
                continue
            prior = spec.priors.get(name)
            if prior is None:
                raise ConfigError(f"free parameter {name} has no prior")
            values.append(prior.sample(rng))
        params = ModelParams.from_vector(np.asarray(values))
        if spec.kernel.constraints_ok(params.beta):
            return params
    raise ConfigError("could not draw kernel parameters satisfying the constraints")


def valid_initial_states(y, spec: ModelSpec, params: ModelParams,
                         population) -> np.ndarray:
    """Initial states with p(y, S | v) > 0, trying the canonical paths
    first and escalating to infectious-from-start before giving up."""
    for style in ("canonical", "infectious_from_start"):
        states = initialize_states(y, spec.observation, style=style)
        if spec.constraints.no_undetected_infections:
            states[np.asarray(y).sum(axis=1) == 0, :] = 1
        if log_joint(states, y, params, spec, population) > NEG_INF:
            return states
    raise InitializationError(
        "no latent state configuration with positive density exists for this "
        "data and observation model"
    )


# ---------------------------------------------------------------------------
# Gibbs configuration and archive
# ---------------------------------------------------------------------------


@dataclass
class MCMCConfig:
    iterations: int
    burn_in: int
    chains: int = 3
    seed: int = 0
    thin: int = 10
    sampler_mode: str = "default"  # "default" | "afss_full"
    sampler_overrides: dict = field(default_factory=dict)  # name -> "rw"|"slice"
    slice_widths: dict = field(default_factory=dict)
    afss_interval: int = 100
    rw_target: float = 0.44
    record_waic: bool = True
    record_states: bool = True

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError("burn-in must satisfy 0 <= M < iterations")
        if self.chains < 1:
            raise ConfigError("chain count must be >= 1")
        if self.thin < 1:
            raise ConfigError("thinning interval must be >= 1")
        if self.sampler_mode not in ("default", "afss_full"):
            raise ConfigError(f"unknown sampler mode {self.sampler_mode!r}")

    @property
    def retained(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass
class PosteriorArchive:
    """Per-chain parameter draws plus online state-functional summaries."""

    names: list
    free: np.ndarray
    draws: np.ndarray  # (chains, iterations, P)
    burn_in: int
    thin: int
    state_counts: np.ndarray  # (N, T+1, 3) over retained draws, all chains
    n_state_draws: int
    functionals: dict  # name -> list of per-chain arrays
    waic_pm: WaicAccumulator | None
    waic_cond: WaicAccumulator | None
    kernel_variant: str
    observation: str
    n_individuals: int
    horizon: int
    sampler_notes: dict = field(default_factory=dict)

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def post_burn(self, param) -> np.ndarray:
        p = param if isinstance(param, int) else self.index_of(param)
        return self.draws[:, self.burn_in:, p]

    def pooled_post_burn(self, param) -> np.ndarray:
        return self.post_burn(param).reshape(-1)

    def waic(self, kind: str = "partially_marginalized"):
        acc = {"partially_marginalized": self.waic_pm, "conditional": self.waic_cond}.get(kind)
        if acc is None:
            raise InputError(f"no {kind} WAIC stream was recorded")
        return acc.assemble()

    def parameter_summary(self):
        from .diagnostics import quantile_interval

        rows = []
        for p, name in enumerate(self.names):
            med, lo, hi = quantile_interval(self.pooled_post_burn(p))
            rows.append((name, med, lo, hi))
        return rows


_DEFAULT_FUNCTIONALS = (
    "undetected_final_removed",
    "undetected_final_infected_or_removed",
    "undetected_infected_during_study",
)


def _state_functionals(states, undetected) -> dict:
    last = states[undetected, -1]
    first = states[undetected, 0]
    return {
        "undetected_final_removed": float(np.sum(last == 3)),
        "undetected_final_infected_or_removed": float(np.sum(last >= 2)),
        "undetected_infected_during_study": float(np.sum((last >= 2) & (first == 1))),
    }


# ---------------------------------------------------------------------------
# The hybrid Gibbs loop
# ---------------------------------------------------------------------------


@dataclass
class _ChainTask:
    y: np.ndarray
    population: object
    spec: ModelSpec
    cfg: MCMCConfig
    chain: int


def _pack_priors(spec: ModelSpec, names, fixed):
    codes = np.zeros(len(names), dtype=np.int64)
    pars = np.zeros((len(names), 3))
    for p, name in enumerate(names):
        if name in fixed:
            continue
        prior = spec.priors.get(name)
        if prior is None:
            raise ConfigError(f"free parameter {name} has no prior")
        kind = type(prior).__name__
        if kind not in _PRIOR_CODE:
            raise ConfigError(f"unsupported prior {kind} for {name}")
        codes[p] = _PRIOR_CODE[kind]
        if kind == "Uniform":
            pars[p] = (prior.lo, prior.hi, 0.0)
        elif kind == "Beta":
            pars[p] = (prior.a, prior.b, 0.0)
        elif kind == "ShiftedGamma":
            pars[p] = (prior.shape, prior.rate, prior.shift)
        elif kind == "Normal":
            pars[p] = (prior.mu, prior.sd, 0.0)
    return codes, pars


def _default_width(spec: ModelSpec, name: str, cfg: MCMCConfig) -> float:
    if name in cfg.slice_widths:
        return float(cfg.slice_widths[name])
    prior = spec.priors.get(name)
    return float(getattr(prior, "width_hint", 1.0)) if prior is not None else 1.0


def _build_blocks(names, free_names, cfg: MCMCConfig, spec: ModelSpec):
    """Sampler blocks in update order: list of (kind, [param names])."""
    scalar_kinds = dict(cfg.sampler_overrides)
    blocks = []
    if cfg.sampler_mode == "afss_full":
        group = [n for n in free_names if n not in scalar_kinds]
        for n in free_names:
            if n in scalar_kinds:
                blocks.append((scalar_kinds[n], [n]))
        if group:
            blocks.append(("afss", group))
        return blocks
    for n in ("theta", "m"):
        if n in free_names:
            blocks.append((scalar_kinds.get(n, "slice"), [n]))
    group = [n for n in free_names if n not in ("theta", "m") and n not in scalar_kinds]
    for n in free_names:
        if n not in ("theta", "m") and n in scalar_kinds:
            blocks.append((scalar_kinds[n], [n]))
    if group:
        blocks.append(("afss", group))
    return blocks


def _run_chain(task: _ChainTask):
    from dataclasses import replace as _dc_replace

    y = np.asarray(task.y, dtype=np.int8)
    spec, cfg = task.spec, task.cfg
    ctx = engine.EngineContext(task.population, spec, y.shape[1] - 1)
    # bounded kernels get their distance range from the population; use the
    # resolved kernel everywhere, including reference-path evaluations
    spec = _dc_replace(spec, kernel=ctx.kernel)
    n, T = ctx.n, ctx.T
    nd = ctx.uniq.shape[0]
    rng = np.random.default_rng(seed_sequence(cfg.seed, task.chain))

    n_beta = spec.kernel.n_params
    names = ModelParams.names(n_beta)
    fixed = spec.fixed_mask()
    free = np.array([name not in fixed for name in names])
    free_names = [name for name in names if name not in fixed]
    prior_codes, prior_pars = _pack_priors(spec, names, fixed)

    params = initialize_params(spec, rng, n_beta)
    states = valid_initial_states(y, spec, params, task.population)
    frozen = frozen_mask(y, spec)
    prevdet = previously_detected(y)
    counts = ctx.new_counts(states)
    undetected = y.sum(axis=1) == 0

    # scratch reused across iterations
    cstay = np.zeros(nd)
    infrows = np.zeros((n, max(nd, 1)), dtype=np.int32)
    inftf = np.zeros(n)
    gbuf = np.empty(max(nd, 1))
    logf = np.full((T + 1, 3), NEG_INF)
    logpred = np.full((T + 1, 3), NEG_INF)
    fps = np.zeros((max(T, 1), 2))
    ownlx = np.zeros((max(T, 1), 2))
    path = np.zeros(T + 1, dtype=np.int8)
    pm = np.zeros((n, T + 1))
    cond = np.zeros((n, T + 1))

    suff = engine._suffstats(states, y, prevdet, counts, ctx.tf, ctx.obs_code,
                             cstay, infrows, inftf)
    vec = params.as_vector()

    def conditional(v):
        return engine._log_conditional(
            v, free, prior_codes, prior_pars, ctx.kernel_code, ctx.anchor,
            ctx.dmax, ctx.dmin, ctx.uniq, ctx.obs_code,
            suff[0], suff[1], suff[2], suff[3], suff[4], suff[5],
            cstay, infrows, inftf, gbuf)

    idx = {name: names.index(name) for name in names}
    blocks = _build_blocks(names, free_names, cfg, spec)
    afss_states = {}
    rw_states = {}
    for kind, members in blocks:
        key = tuple(members)
        if kind == "afss":
            widths = [_default_width(spec, nme, cfg) for nme in members]
            afss_states[key] = AfssState.create(widths, interval=cfg.afss_interval)
        elif kind == "rw":
            rw_states[key] = RwScaleState(target_rate=cfg.rw_target)
        elif kind != "slice":
            raise ConfigError(f"unknown sampler kind {kind!r}")

    draws = np.empty((cfg.iterations, len(names)))
    state_counts = np.zeros((n, T + 1, 3), dtype=np.int64)
    functionals = {name: [] for name in _DEFAULT_FUNCTIONALS}
    waic_pm_acc = WaicAccumulator((n, T)) if cfg.record_waic else None
    waic_cond_acc = WaicAccumulator((n, T)) if cfg.record_waic else None
    n_state_draws = 0

    for q in range(1, cfg.iterations + 1):
        if q == cfg.burn_in + 1:
            for st in afss_states.values():
                st.freeze()
            for st in rw_states.values():
                st.freeze()
        for kind, members in blocks:
            key = tuple(members)
            if kind == "afss":
                cols = np.array([idx[nme] for nme in members])

                def block_target(x, _cols=cols):
                    v = vec.copy()
                    v[_cols] = x
                    return conditional(v)

                vec[cols] = afss_update(block_target, vec[cols], afss_states[key], rng)
            else:
                p = idx[members[0]]

                def scalar_target(x, _p=p):
                    v = vec.copy()
                    v[_p] = x
                    return conditional(v)

                if kind == "slice":
                    width = _default_width(spec, members[0], cfg)
                    vec[p], _ = slice_univariate(scalar_target, vec[p], width, rng)
                else:
                    vec[p] = adaptive_rw_mh(scalar_target, vec[p], rw_states[key], rng)

        params = ModelParams.from_vector(vec)
        sc = ctx.unpack(params)
        uniforms = rng.random((n, T + 1))
        code, i_bad, t_bad = engine._sweep(
            n, T, states, counts, y, prevdet, frozen, sc.gtab, ctx.tf,
            sc.alpha, sc.theta_logs, ctx.obs_code, sc.log_stay, sc.log_rem,
            ctx.rev_indptr, ctx.rev_indices, ctx.rev_edge, ctx.desc_idx,
            ctx.log_init, uniforms, logf, logpred, fps, ownlx, path)
        if code != 0:
            raise engine.FilterDegeneracyError(
                i_bad, t_bad,
                f"chain {task.chain} aborted at iteration {q}: filter degenerated "
                f"for individual {i_bad} at t={t_bad} with v={vec.tolist()}")
        suff = engine._suffstats(states, y, prevdet, counts, ctx.tf,
                                 ctx.obs_code, cstay, infrows, inftf)
        draws[q - 1] = vec

        if q > cfg.burn_in and (q - cfg.burn_in) % cfg.thin == 0:
            n_state_draws += 1
            if cfg.record_states:
                for s in (1, 2, 3):
                    state_counts[:, :, s - 1] += states == s
                for name, value in _state_functionals(states, undetected).items():
                    functionals[name].append(value)
            if cfg.record_waic:
                code, i_bad, t_bad = engine._waic_pass(
                    n, T, states, counts, y, prevdet, frozen, sc.gtab, ctx.tf,
                    sc.alpha, sc.theta_logs, ctx.obs_code, sc.log_stay,
                    sc.log_rem, ctx.rev_indptr, ctx.rev_indices, ctx.rev_edge,
                    ctx.desc_idx, ctx.log_init, logf, logpred, fps, ownlx,
                    pm, cond)
                if code != 0:
                    raise engine.FilterDegeneracyError(i_bad, t_bad)
                waic_pm_acc.update(pm[:, 1:])
                waic_cond_acc.update(cond[:, 1:])

    notes = {
        "afss_fallbacks": int(sum(st.fallbacks for st in afss_states.values())),
        "rw_acceptance": {
            "/".join(k): st.accepts / max(st.steps, 1) for k, st in rw_states.items()
        },
    }
    return (draws, state_counts, {k: np.asarray(v) for k, v in functionals.items()},
            waic_pm_acc, waic_cond_acc, n_state_draws, notes)


def gibbs_run(y, population, spec: ModelSpec, cfg: MCMCConfig) -> PosteriorArchive:
    """Run the hybrid Gibbs sampler and return the merged archive.

    Chains are independent jobs seeded from (master seed, chain index);
    results are identical for any worker count.
    """
    from .model import validate_observation_matrix

    y = np.asarray(y, dtype=np.int8)
    validate_observation_matrix(y, spec.observation)
    tasks = [_ChainTask(y, population, spec, cfg, c) for c in range(cfg.chains)]
    results = parallel_map(_run_chain, tasks)

    n_beta = spec.kernel.n_params
    names = ModelParams.names(n_beta)
    fixed = spec.fixed_mask()
    free = np.array([name not in fixed for name in names])

    draws = np.stack([r[0] for r in results])
    state_counts = sum(r[1] for r in results)
    functionals = {
        name: [r[2][name] for r in results] for name in _DEFAULT_FUNCTIONALS
    }
    waic_pm = waic_cond = None
    if cfg.record_waic:
        waic_pm = results[0][3]
        waic_cond = results[0][4]
        for r in results[1:]:
            waic_pm = waic_pm.merge(r[3])
            waic_cond = waic_cond.merge(r[4])
    n_state_draws = sum(r[5] for r in results)
    notes = {f"chain{c}": r[6] for c, r in enumerate(results)}

    return PosteriorArchive(
        names=names,
        free=free,
        draws=draws,
        burn_in=cfg.burn_in,
        thin=cfg.thin,
        state_counts=state_counts,
        n_state_draws=n_state_draws,
        functionals=functionals,
        waic_pm=waic_pm,
        waic_cond=waic_cond,
        kernel_variant=spec.kernel.variant.value,
        observation=spec.observation.value,
        n_individuals=y.shape[0],
        horizon=y.shape[1] - 1,
        sampler_notes=notes,
    )
