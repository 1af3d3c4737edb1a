"""Shared oracles and instance builders for the test suite.

The oracles here deliberately avoid the package's fast paths: path
posteriors come from brute-force enumeration through the pure-Python
joint density, forward products from explicit state substitution, and
likelihood factors from an independent re-derivation.
"""

from __future__ import annotations

import math

import numpy as np

from hmmilm import (
    KernelSpec,
    KernelVariant,
    ModelParams,
    ModelSpec,
    ObservationModel,
    Population,
    SimConfig,
    kernel_effect,
    log_joint,
    simulate_outbreak,
)
from hmmilm.diagnostics import effective_sample_size
from hmmilm.model import Uniform, initial_state_distribution, previously_detected

STUDY_PRIORS = {
    "theta": Uniform(0.0, 1.0),
    "m": Uniform(1.0, 20.0),
    "alpha": Uniform(0.0, 1.0),
    "beta0": Uniform(0.0, 1.0),
    "beta1": Uniform(0.0, 20.0),
}


def random_instance(rng, n_lo=2, n_hi=3, t_lo=2, t_hi=3, observation=None,
                    complete=None, p_initial=0.3):
    """A small random model with a valid (simulated) state configuration."""
    N = int(rng.integers(n_lo, n_hi + 1))
    T = int(rng.integers(t_lo, t_hi + 1))
    use_complete = bool(rng.integers(0, 2)) if complete is None else complete
    pop = Population.complete(N) if use_complete else Population.grid(1, N, 1.0, 0.5, order=2)
    kernel = KernelSpec(
        KernelVariant.POWER_LAW_EXACT if rng.integers(0, 2) else KernelVariant.POWER_LAW_TAYLOR
    )
    obs = observation or rng.choice([
        ObservationModel.SINGLE_DETECTION,
        ObservationModel.CONTINUOUS_TESTING,
    ])
    params = ModelParams(
        theta=float(rng.uniform(0.2, 0.95)),
        m=float(rng.uniform(1.5, 8.0)),
        alpha=float(rng.uniform(0.0, 0.3)),
        beta=np.array([rng.uniform(0.01, 0.8), rng.uniform(1.2, 4.0)]),
    )
    init = initial_state_distribution(N, p_initial)
    spec = ModelSpec(kernel, obs, {}, init)
    sim = SimConfig(pop, kernel, obs, params, init, T=T, seed=0)
    states, y = simulate_outbreak(sim, rng=rng)
    return pop, spec, params, states, y


def all_paths(T: int) -> np.ndarray:
    """All 3^(T+1) state paths, rows of length T+1."""
    return np.array(
        np.meshgrid(*[[1, 2, 3]] * (T + 1), indexing="ij")
    ).reshape(T + 1, -1).T.astype(np.int8)


def enumerate_path_posterior(i, states, y, params, spec, population):
    """Brute-force full conditional of individual i's path from the joint
    density: normalize exp(log_joint) over every candidate path."""
    T = states.shape[1] - 1
    paths = all_paths(T)
    logp = np.full(len(paths), -np.inf)
    for k, path in enumerate(paths):
        candidate = np.array(states, copy=True)
        candidate[i, :] = path
        logp[k] = log_joint(candidate, y, params, spec, population)
    finite = logp[np.isfinite(logp)]
    assert finite.size, "conditioning configuration has zero density"
    mx = finite.max()
    w = np.exp(np.where(np.isfinite(logp), logp - mx, -np.inf))
    return paths, w / w.sum()


def brute_force_forward_product(i, t, s_i, states, y, params, spec, population):
    """Product over {j : i in NE(j)} of j's transition density t -> t+1
    with individual i's state at t substituted to s_i, via explicit
    pairwise recomputation."""
    modified = np.array(states, copy=True)
    modified[i, t] = s_i
    total = 0.0
    for j in range(population.n):
        if i not in population.neighbors(j).tolist():
            continue
        rate = params.alpha
        tf = 1.0
        if spec.covariates is not None:
            tf = 1.0 - float(spec.covariates[t])
        for k, d in population.neighbor_descriptors(j, order=spec.kernel.uses_order):
            if modified[k, t] == 2:
                rate += tf * kernel_effect(spec.kernel, params.beta, d)
        frm, to = int(modified[j, t]), int(states[j, t + 1])
        if frm == 1:
            p = math.exp(-rate) if to == 1 else (-math.expm1(-rate) if to == 2 else 0.0)
        elif frm == 2:
            p = 1.0 - 1.0 / params.m if to == 2 else (1.0 / params.m if to == 3 else 0.0)
        else:
            p = 1.0 if to == 3 else 0.0
        if p <= 0.0:
            return -np.inf
        total += math.log(p)
    return total


def pm_pointwise_enumeration_oracle(i, t, states, y, params, spec, pop):
    """p(y_it | S_(-i)(0:t), y_i(0:t-1)) by enumerating individual i's
    paths with and without the observation factor at t.  Paths differing
    after t are summed over; full-length enumeration counts each prefix
    the same number of times, so the ratio is unaffected."""
    from hmmilm.model import log_transition_prob, obs_log_density, spread_rate

    T = states.shape[1] - 1
    prev = previously_detected(np.asarray(y))

    def mass(include_obs_at_t):
        total = 0.0
        for path in all_paths(T):
            candidate = np.array(states, copy=True)
            candidate[i, :] = path
            lp = 0.0
            ok = True
            p0 = spec.initial[i, path[0] - 1]
            if p0 <= 0:
                continue
            lp += math.log(p0)
            for j in range(pop.n):
                if j == i:
                    continue
                pj = spec.initial[j, states[j, 0] - 1]
                if pj <= 0:
                    ok = False
                    break
                lp += math.log(pj)
            if not ok:
                continue
            horizon_obs = t if include_obs_at_t else t - 1
            for u in range(1, t + 1):
                for j in range(pop.n):
                    rate = spread_rate(j, candidate[:, u - 1], params, spec, pop, u)
                    lt = log_transition_prob(candidate[j, u - 1], candidate[j, u],
                                             params.alpha + rate, params.m)
                    if lt == -math.inf:
                        ok = False
                        break
                    lp += lt
                if not ok:
                    break
                if u <= horizon_obs:
                    lo = obs_log_density(spec.observation, int(np.asarray(y)[i, u]),
                                         int(candidate[i, u]), bool(prev[i, u]),
                                         params.theta)
                    if lo == -math.inf:
                        ok = False
                        break
                    lp += lo
            if ok:
                total += math.exp(lp)
        return total

    return math.log(mass(True) / mass(False))


def assert_moments(draws, mean_true, var_true, n_se=4.0, label=""):
    """Mean/variance match within n_se Monte Carlo standard errors, using
    the measured effective sample size of the draw sequence."""
    draws = np.asarray(draws, dtype=float)
    ess = max(effective_sample_size(draws), 4.0)
    se_mean = math.sqrt(var_true / ess)
    se_var = var_true * math.sqrt(2.0 / ess)
    mean_err = abs(draws.mean() - mean_true)
    var_err = abs(draws.var(ddof=1) - var_true)
    assert mean_err < n_se * se_mean, (
        f"{label} mean off: {draws.mean():.4f} vs {mean_true} "
        f"(err {mean_err:.4f} > {n_se} x {se_mean:.4f}, ESS {ess:.0f})")
    assert var_err < n_se * se_var, (
        f"{label} variance off: {draws.var(ddof=1):.4f} vs {var_true} "
        f"(err {var_err:.4f} > {n_se} x {se_var:.4f}, ESS {ess:.0f})")
