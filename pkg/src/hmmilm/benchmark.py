"""Study orchestration: parameter-recovery studies, neighborhood-order
selection, and observation/kernel variant ladders, at configurable scale.

Desk-scale defaults (10x10 grid, T=7, m=3, 20k iterations, 5k burn-in,
3 chains) keep the whole suite around an hour on a laptop; the
full-study settings (26x20 grid, m=16, 200k iterations, 232 replicates)
remain reachable through the same configs.  Reference results at full
scale are recorded in FULL_SCALE_TARGETS as labeled targets only; they
are far outside desk-scale runtime and are not asserted in CI.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import (
    ConvergenceReport,
    WaicResult,
    convergence_report,
    quantile_interval,
    r0_summary,
)
from .errors import ConfigError
from .model import (
    KernelSpec,
    KernelVariant,
    ModelParams,
    ModelSpec,
    ObservationModel,
    Uniform,
    initial_state_distribution,
)
from .population import Population
from .samplers import MCMCConfig, PosteriorArchive, gibbs_run
from .simulate import SimConfig, simulate_outbreak
from .util import parallel_map, rng_for, seed_sequence

# Published full-scale results, kept as labeled targets for comparison
# reports.  These come from 200k x 3-chain runs (and a 232-replicate
# cluster study); they are not reproducible at desk scale and are never
# asserted by the test suite.
FULL_SCALE_TARGETS = {
    "recovery": {
        "replications": 232,
        "converged": 230,
        "coverage_pct": {"alpha": 93.91, "beta0": 95.22, "beta1": 95.65,
                         "m": 99.56, "theta": 95.21},
        "avg_ci_width": {"alpha": 0.02, "beta0": 0.04, "beta1": 2.00,
                         "m": 13.03, "theta": 0.23},
        "truths": {"theta": 0.55, "m": 16.0, "alpha": 0.015,
                   "beta0": 0.07, "beta1": 3.0},
    },
    "kernel_waic": {
        "power_law_taylor": 1591.76,
        "power_law_exact": 1592.24,
        "neighborhood_order": 1619.14,
        "linear": 1619.93,
        "quadratic": 1613.29,
        "spline": 1608.22,  # out-of-scope kernel, target retained for context
    },
    "neighborhood_order_waic": {2: 1602.68, 3: 1591.76, 4: 1587.32},
    "neighborhood_order_selected": 3,
    "norovirus_ladder": {
        # model label -> (R0 median, lo95, hi95, WAIC)
        "unknown_removal_times": (2.61, 1.0, 7.04, 221.0),
        "known_removal_times": (0.65, 0.04, 1.82, 222.36),
        "krt_ward_open": (0.64, 0.04, 1.81, 222.35),
        "krt_ward_open_no_undetected": (0.73, 0.11, 1.52, 222.28),
        "krt_ward_open_no_undetected_no_intercept": (1.26, 0.81, 1.92, 222.61),
    },
    "undetected_counts": {
        "norovirus_final_removed": (9, 1, 31),
        "norovirus_final_infected_or_removed": (14, 4, 35),
        "tswv_infected_during_study": (94, 58, 133),
    },
    "infection_probability_half_meter_pct": (39, 23, 49),
}

STUDY_PRIORS = {
    "theta": Uniform(0.0, 1.0),
    "m": Uniform(1.0, 20.0),
    "alpha": Uniform(0.0, 1.0),
    "beta0": Uniform(0.0, 1.0),
    "beta1": Uniform(0.0, 20.0),
}


@dataclass
class FitResult:
    label: str
    archive: PosteriorArchive
    convergence: ConvergenceReport
    waic: WaicResult | None
    waic_conditional: WaicResult | None
    seconds: float
    timed_out: bool = False

    @property
    def converged(self) -> bool:
        return self.convergence.passed and not self.timed_out


def fit_dataset(y, population, spec: ModelSpec, mcmc: MCMCConfig,
                label: str = "model", gr_threshold: float = 1.05,
                ess_threshold: float = 1000.0,
                timeout_s: float | None = None) -> FitResult:
    """One convergence-checked fit.  A timeout, when configured, only
    marks the row; the fit itself always runs to completion."""
    start = time.perf_counter()
    archive = gibbs_run(y, population, spec, mcmc)
    seconds = time.perf_counter() - start
    report = convergence_report(archive, gr_threshold, ess_threshold)
    waic = archive.waic() if mcmc.record_waic else None
    waic_cond = archive.waic("conditional") if mcmc.record_waic else None
    return FitResult(
        label=label,
        archive=archive,
        convergence=report,
        waic=waic,
        waic_conditional=waic_cond,
        seconds=seconds,
        timed_out=bool(timeout_s is not None and seconds > timeout_s),
    )


# ---------------------------------------------------------------------------
# Parameter-recovery study
# ---------------------------------------------------------------------------


@dataclass
class RecoveryStudyConfig:
    population: Population
    truth: ModelParams
    T: int
    replications: int
    mcmc: MCMCConfig
    priors: dict = field(default_factory=lambda: dict(STUDY_PRIORS))
    kernel: KernelSpec = field(default_factory=lambda: KernelSpec(KernelVariant.POWER_LAW_TAYLOR))
    observation: ObservationModel = ObservationModel.SINGLE_DETECTION
    p_initial_infectious: float = 0.01
    seed: int = 0
    gr_threshold: float = 1.05
    ess_threshold: float = 1000.0
    timeout_s: float | None = None
    scored: tuple = ("theta", "m", "alpha", "beta0", "beta1")


def desk_recovery_config(replications: int = 20, seed: int = 0,
                         iterations: int = 20000, burn_in: int = 5000,
                         chains: int = 3, grid=(10, 10),
                         m_true: float = 3.0,
                         ess_threshold: float = 300.0) -> RecoveryStudyConfig:
    """Scaled-down recovery study: 10x10 grid, T=7, true m below T so the
    infectious-duration posterior concentrates.

    The published convergence gate (min ESS > 1000) presumes 450k
    post-burn-in draws; at the desk scale's 45k draws the default gate is
    ESS > 300, i.e. three times stricter than proportional scaling.
    """
    rows, cols = grid
    return RecoveryStudyConfig(
        population=Population.grid(rows, cols, 1.0, 0.5, order=3),
        truth=ModelParams(0.55, m_true, 0.015, np.array([0.07, 3.0])),
        T=7,
        replications=replications,
        mcmc=MCMCConfig(iterations=iterations, burn_in=burn_in, chains=chains,
                        seed=seed, thin=10, sampler_mode="afss_full",
                        record_waic=False),
        seed=seed,
        ess_threshold=ess_threshold,
    )


def full_scale_recovery_config(seed: int = 0) -> RecoveryStudyConfig:
    """The published study's settings: 26x20 grid, m=16, 232 replicates,
    200k iterations on 3 chains.  Cluster-scale; hours per replicate."""
    return RecoveryStudyConfig(
        population=Population.grid(26, 20, 1.0, 0.5, order=3),
        truth=ModelParams(0.55, 16.0, 0.015, np.array([0.07, 3.0])),
        T=7,
        replications=232,
        mcmc=MCMCConfig(iterations=200000, burn_in=50000, chains=3, seed=seed,
                        thin=10, sampler_mode="afss_full", record_waic=False),
        seed=seed,
    )


@dataclass
class RecoveryResult:
    replicate_rows: list  # (replicate, param, median, lo95, hi95, covered, converged)
    coverage_rows: list  # (param, coverage_pct, avg_ci_width)
    median_rows: list  # (param, median_of_medians, q025, q975)
    n_converged: int
    seconds_per_fit: list


def _recovery_replicate(args):
    cfg, rep = args
    sim = SimConfig(cfg.population, cfg.kernel, cfg.observation, cfg.truth,
                    initial_state_distribution(cfg.population.n, cfg.p_initial_infectious),
                    T=cfg.T, seed=0)
    states, y = simulate_outbreak(sim, rng=rng_for(cfg.seed, rep, 0))
    fit_seed = int(seed_sequence(cfg.seed, rep, 1).generate_state(1)[0])
    spec = sim.model_spec(priors=cfg.priors)
    mcmc = replace(cfg.mcmc, seed=fit_seed)
    fit = fit_dataset(y, cfg.population, spec, mcmc,
                      label=f"replicate{rep}", gr_threshold=cfg.gr_threshold,
                      ess_threshold=cfg.ess_threshold, timeout_s=cfg.timeout_s)
    truths = dict(zip(ModelParams.names(len(cfg.truth.beta)), cfg.truth.as_vector()))
    rows = []
    for name in cfg.scored:
        med, lo, hi = quantile_interval(fit.archive.pooled_post_burn(name))
        covered = lo <= truths[name] <= hi
        rows.append((rep, name, med, lo, hi, covered, fit.converged))
    return rows, fit.converged, fit.seconds


def replicate_study(cfg: RecoveryStudyConfig) -> RecoveryResult:
    """Simulate/fit `replications` outbreaks and aggregate coverage.

    Non-converged fits are reported per replicate but excluded from the
    coverage and median aggregates.
    """
    if cfg.replications < 1:
        raise ConfigError("a recovery study needs at least one replication")
    results = parallel_map(_recovery_replicate,
                           [(cfg, rep) for rep in range(cfg.replications)])
    replicate_rows = [row for rows, _, _ in results for row in rows]
    converged_flags = [ok for _, ok, _ in results]
    seconds = [s for _, _, s in results]
    coverage_rows, median_rows = [], []
    for name in cfg.scored:
        rows = [r for r in replicate_rows if r[1] == name and r[6]]
        if rows:
            coverage = 100.0 * np.mean([r[5] for r in rows])
            width = float(np.mean([r[4] - r[3] for r in rows]))
            med, qlo, qhi = quantile_interval([r[2] for r in rows])
        else:
            coverage = width = med = qlo = qhi = float("nan")
        coverage_rows.append((name, coverage, width))
        median_rows.append((name, med, qlo, qhi))
    return RecoveryResult(replicate_rows, coverage_rows, median_rows,
                          int(np.sum(converged_flags)), seconds)


def run_recovery_study(cfg: RecoveryStudyConfig, out_dir=None) -> RecoveryResult:
    """Recovery study plus CSV emission when an output directory is given."""
    result = replicate_study(cfg)
    if out_dir is not None:
        from . import io as hio
        import os

        os.makedirs(out_dir, exist_ok=True)
        hio._write_rows(
            os.path.join(out_dir, "recovery_replicates.csv"),
            ("replicate", "param", "median", "lo95", "hi95", "covered", "converged"),
            result.replicate_rows)
        hio._write_rows(
            os.path.join(out_dir, "recovery_coverage.csv"),
            ("param", "coverage_pct", "avg_ci_width"), result.coverage_rows)
        hio._write_rows(
            os.path.join(out_dir, "recovery_medians.csv"),
            ("param", "median_of_medians", "q025", "q975"), result.median_rows)
    return result


# ---------------------------------------------------------------------------
# Neighborhood-order selection
# ---------------------------------------------------------------------------


def select_order(orders, waics, threshold: float = 5.0) -> int:
    """Stop increasing the order once the WAIC improvement drops below
    `threshold`; returns the selected order."""
    if not orders or len(orders) != len(waics):
        raise ConfigError("orders and WAIC values must align and be non-empty")
    selected = orders[0]
    for k in range(1, len(orders)):
        if waics[k - 1] - waics[k] >= threshold:
            selected = orders[k]
        else:
            break
    return selected


def _order_worker(args):
    y, grid_dims, spec_template, mcmc, order, gr_threshold, ess_threshold = args
    rows, cols, rsp, csp = grid_dims
    pop = Population.grid(rows, cols, rsp, csp, order=order)
    fit = fit_dataset(y, pop, spec_template, mcmc, label=f"order{order}",
                      gr_threshold=gr_threshold, ess_threshold=ess_threshold)
    return (order, fit.waic.waic, fit.converged)


def run_neighborhood_selection(y, grid_dims, spec_template: ModelSpec,
                               mcmc: MCMCConfig, orders,
                               gr_threshold: float = 1.05,
                               ess_threshold: float = 1000.0):
    """Fit one model per neighborhood order and apply the <threshold
    stopping rule.  `grid_dims` is (rows, cols, row_spacing, col_spacing).
    Returns (rows, selected_order); rows are (order, waic, converged).
    """
    orders = list(orders)
    if not orders or sorted(orders) != orders:
        raise ConfigError("orders must be a non-empty increasing list")
    table = parallel_map(_order_worker, [
        (y, grid_dims, spec_template, mcmc, order, gr_threshold, ess_threshold)
        for order in orders
    ])
    selected = select_order(orders, [w for _, w, _ in table])
    return table, selected


# ---------------------------------------------------------------------------
# Variant ladder
# ---------------------------------------------------------------------------


def _ladder_worker(args):
    y, population, label, spec, mcmc, gr_threshold, ess_threshold = args
    fit = fit_dataset(y, population, spec, mcmc, label=label,
                      gr_threshold=gr_threshold, ess_threshold=ess_threshold)
    r0 = None
    if spec.kernel.is_homogeneous:
        r0 = r0_summary(fit.archive, population.n)
    return (label, fit.waic.waic, fit.waic_conditional.waic,
            fit.archive.parameter_summary(), r0, fit.converged, fit.seconds)


def run_variant_ladder(y, population, variants, mcmc: MCMCConfig,
                       gr_threshold: float = 1.05,
                       ess_threshold: float = 1000.0):
    """Fit a list of (label, ModelSpec) variants on shared data.

    Returns one row per variant: (label, waic, conditional waic,
    parameter summary rows, R0 summary or None, converged, seconds).
    """
    if not variants:
        raise ConfigError("the variant ladder needs at least one variant")
    return parallel_map(_ladder_worker, [
        (y, population, label, spec, mcmc, gr_threshold, ess_threshold)
        for label, spec in variants
    ])


def warmup():
    """Compile the hot numba kernels once (e.g. before forking workers)."""
    pop = Population.grid(2, 2, 1.0, 0.5, order=1)
    truth = ModelParams(0.5, 2.0, 0.1, np.array([0.1, 2.0]))
    sim = SimConfig(pop, KernelSpec(KernelVariant.POWER_LAW_TAYLOR),
                    ObservationModel.SINGLE_DETECTION, truth,
                    initial_state_distribution(4, 0.25), T=2, seed=0)
    states, y = simulate_outbreak(sim)
    spec = sim.model_spec(priors=dict(STUDY_PRIORS))
    gibbs_run(y, pop, spec, MCMCConfig(iterations=3, burn_in=1, chains=1,
                                       seed=0, thin=1))
