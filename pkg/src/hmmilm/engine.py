"""Per-individual forward filtering / backward sampling engine.

Draws one individual's full latent path exactly from its conditional
distribution given every other individual's path.  The only difference
from a textbook HMM filter is the forward-product term: the product over
individuals j with i in NE(j) of j's transition density, which carries
the between-chain dependence.  Because that product only depends on
whether individual i is infectious, two values per time step suffice.

Everything inside the sweep runs in compiled (numba) code and in log
space.  Infection pressures are never cached as floats; instead we keep
integer counts of infectious neighbors per (individual, time, distance
bucket) and take the dot product with the kernel table on demand, which
makes cached pressures bit-identical to recomputation by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import FilterDegeneracyError, InputError, ParameterDomainError
from .model import (
    KernelVariant,
    ModelParams,
    ModelSpec,
    ObservationModel,
    previously_detected,
)

NEG_INF = float("-inf")

OBS_CODE = {
    ObservationModel.SINGLE_DETECTION: 0,
    ObservationModel.CONTINUOUS_TESTING: 1,
    ObservationModel.KNOWN_REMOVAL: 2,
    ObservationModel.KNOWN_INFECTION: 3,
}

KERNEL_CODE = {
    KernelVariant.POWER_LAW_TAYLOR: 0,
    KernelVariant.POWER_LAW_EXACT: 1,
    KernelVariant.NEIGHBORHOOD_ORDER: 2,
    KernelVariant.LINEAR: 3,
    KernelVariant.QUADRATIC_CONSTRAINED: 4,
    KernelVariant.HOMOGENEOUS_WARD_CLOSURE: 5,
}

# Cap on N * T * n_distance_buckets for the pressure-count cache.
_MAX_COUNT_CELLS = 150_000_000


# ---------------------------------------------------------------------------
# Compiled primitives
# ---------------------------------------------------------------------------


@njit(cache=True)
def _kernel_values(g, uniq, code, b0, b1, b2, anchor, dmax, dmin):
    """Fill g with the kernel evaluated at each unique descriptor.

    Returns 0 on success, 1 on a parameter-domain violation.
    """
    if code == 4:
        # positivity + strictly-decreasing constraint for the quadratic
        if not (b0 > 0.0 and b1 > 0.0 and (-b1 - 2.0 * b2 * (dmax - dmin)) < 0.0):
            return 1
    for k in range(uniq.shape[0]):
        d = uniq[k]
        if code == 0:
            ld = math.log(d)
            q = b1 - anchor
            val = b0 * d ** (-anchor) * (1.0 - ld * q + 0.5 * ld * ld * q * q)
        elif code == 1:
            val = b0 * d ** (-b1)
        elif code == 2:
            o = int(d)
            if o == 1:
                val = b0
            elif o == 2:
                val = b1
            else:
                val = b2
        elif code == 3:
            val = b0 + b1 * (dmax - d)
        elif code == 4:
            u = dmax - d
            val = b0 + b1 * u + b2 * u * u
        else:
            val = b0
        if val < 0.0 or not np.isfinite(val):
            return 1
        g[k] = val
    return 0


@njit(cache=True)
def _log_obs(code, yv, s, pd, log_th, log_1mth):
    """log p(y | state s, previously-detected pd)."""
    if code == 0:  # single detection
        if s == 2 and pd == 0:
            return log_th if yv == 1 else log_1mth
        return 0.0 if yv == 0 else NEG_INF
    if code == 1:  # continuous testing
        if s == 2:
            return log_th if yv == 1 else log_1mth
        return 0.0 if yv == 0 else NEG_INF
    if code == 2:  # known removal times
        if s == 3 and pd == 0:
            return 0.0 if yv == 1 else NEG_INF
        return 0.0 if yv == 0 else NEG_INF
    # known infection times
    if s == 2 and pd == 0:
        return 0.0 if yv == 1 else NEG_INF
    return 0.0 if yv == 0 else NEG_INF


@njit(cache=True)
def _lse2(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = a if a > b else b
    return m + math.log(math.exp(a - m) + math.exp(b - m))


@njit(cache=True)
def _normalize3(row):
    """In-place log-normalize; returns the log normalizer (or -inf)."""
    m = row[0]
    if row[1] > m:
        m = row[1]
    if row[2] > m:
        m = row[2]
    if m == NEG_INF:
        return NEG_INF
    tot = math.exp(row[0] - m) + math.exp(row[1] - m) + math.exp(row[2] - m)
    logz = m + math.log(tot)
    row[0] -= logz
    row[1] -= logz
    row[2] -= logz
    return logz


@njit(cache=True)
def _draw3(logw, u):
    """Categorical draw (0/1/2) from unnormalized log weights; -1 if all zero."""
    m = logw[0]
    if logw[1] > m:
        m = logw[1]
    if logw[2] > m:
        m = logw[2]
    if m == NEG_INF:
        return -1
    p0 = math.exp(logw[0] - m)
    p1 = math.exp(logw[1] - m)
    p2 = math.exp(logw[2] - m)
    r = u * (p0 + p1 + p2)
    if r < p0:
        return 0
    if r < p0 + p1:
        return 1
    return 2


@njit(cache=True)
def _sus_pressure_excl(i, j, u, states, counts, gtab, de):
    """Infection pressure on susceptible j at time u, excluding i's
    contribution, from the integer bucket counts."""
    base = 0.0
    i_inf = states[i, u] == 2
    for d in range(gtab.shape[0]):
        c = counts[j, u, d]
        if i_inf and d == de:
            c -= 1
        base += gtab[d] * c
    return base


@njit(cache=True)
def _log_trans_sus(x, to_state):
    """log P(next | current = susceptible) with total rate x = alpha + lam."""
    if to_state == 1:
        return -x
    if to_state == 2:
        if x <= 0.0:
            return NEG_INF
        return math.log(-math.expm1(-x))
    return NEG_INF


@njit(cache=True)
def _fp_pair(i, u, states, counts, gtab, tf_u, alpha, log_stay, log_rem,
             rev_indptr, rev_indices, rev_edge, desc_idx):
    """Log forward products at time u: the product over {j : i in NE(j)} of
    j's transition density u -> u+1, once with i infectious and once not."""
    fp_inf = 0.0
    fp_non = 0.0
    for e in range(rev_indptr[i], rev_indptr[i + 1]):
        j = rev_indices[e]
        sj = states[j, u]
        sn = states[j, u + 1]
        if sj == 1:
            de = desc_idx[rev_edge[e]]
            base = _sus_pressure_excl(i, j, u, states, counts, gtab, de)
            x_non = alpha + tf_u * base
            x_inf = alpha + tf_u * (base + gtab[de])
            fp_non += _log_trans_sus(x_non, sn)
            fp_inf += _log_trans_sus(x_inf, sn)
        elif sj == 2:
            c = log_stay if sn == 2 else (log_rem if sn == 3 else NEG_INF)
            fp_non += c
            fp_inf += c
        else:
            c = 0.0 if sn == 3 else NEG_INF
            fp_non += c
            fp_inf += c
    return fp_inf, fp_non


@njit(cache=True)
def _row0(i, states, counts, gtab, tf, alpha, log_stay, log_rem,
          rev_indptr, rev_indices, rev_edge, desc_idx, log_init, out_row):
    """Filtered probabilities at t=0 (the t=0 observation carries no
    information because y_i0 = 0 by construction)."""
    fp_inf, fp_non = _fp_pair(i, 0, states, counts, gtab, tf[0], alpha,
                              log_stay, log_rem, rev_indptr, rev_indices,
                              rev_edge, desc_idx)
    for s in range(3):
        fp = fp_inf if s == 1 else fp_non
        out_row[s] = log_init[i, s] + fp
    return (fp_inf, fp_non, _normalize3(out_row))


@njit(cache=True)
def _rowt(i, t, T, states, counts, y, prevdet, gtab, tf, alpha, theta_logs,
          obs_code, log_stay, log_rem, rev_indptr, rev_indices, rev_edge,
          desc_idx, prev_row, out_row, out_pred, out_ownlx):
    """Filtered probabilities at 1 <= t <= T from the previous filtered row.

    Fills the predictive row and individual i's own log transition terms
    (reused by the backward pass); at t = T there is no forward product.
    """
    u = t - 1
    base = 0.0
    for d in range(gtab.shape[0]):
        base += gtab[d] * counts[i, u, d]
    x = alpha + tf[u] * base
    lp12 = _log_trans_sus(x, 2)
    l1m = -x
    out_ownlx[0] = lp12
    out_ownlx[1] = l1m

    out_pred[0] = prev_row[0] + l1m
    out_pred[1] = _lse2(prev_row[0] + lp12, prev_row[1] + log_stay)
    out_pred[2] = _lse2(prev_row[1] + log_rem, prev_row[2])

    if t < T:
        fp_inf, fp_non = _fp_pair(i, t, states, counts, gtab, tf[t], alpha,
                                  log_stay, log_rem, rev_indptr, rev_indices,
                                  rev_edge, desc_idx)
    else:
        fp_inf = 0.0
        fp_non = 0.0
    pd = prevdet[i, t]
    yv = y[i, t]
    for s in range(3):
        fp = fp_inf if s == 1 else fp_non
        lo = _log_obs(obs_code, yv, s + 1, pd, theta_logs[0], theta_logs[1])
        out_row[s] = lo + out_pred[s] + fp
    return (fp_inf, fp_non, _normalize3(out_row))


@njit(cache=True)
def _filter_full(i, T, states, counts, y, prevdet, gtab, tf, alpha,
                 theta_logs, obs_code, log_stay, log_rem,
                 rev_indptr, rev_indices, rev_edge, desc_idx, log_init,
                 logf, logpred, fps, ownlx):
    """Forward pass for individual i; fills all workspace tables.

    Returns -1 on success, else the time index of the degenerate row.
    """
    fp_inf, fp_non, logz = _row0(i, states, counts, gtab, tf, alpha, log_stay,
                                 log_rem, rev_indptr, rev_indices, rev_edge,
                                 desc_idx, log_init, logf[0])
    fps[0, 0] = fp_inf
    fps[0, 1] = fp_non
    if logz == NEG_INF:
        return 0
    for t in range(1, T + 1):
        fp_inf, fp_non, logz = _rowt(
            i, t, T, states, counts, y, prevdet, gtab, tf, alpha, theta_logs,
            obs_code, log_stay, log_rem, rev_indptr, rev_indices, rev_edge,
            desc_idx, logf[t - 1], logf[t], logpred[t], ownlx[t - 1])
        if t < T:
            fps[t, 0] = fp_inf
            fps[t, 1] = fp_non
        if logz == NEG_INF:
            return t
    return -1


@njit(cache=True)
def _backward(T, logf, ownlx, log_stay, log_rem, uniforms, path):
    """Sample the path backwards from the filled filter tables.

    Returns -1 on success, else the time index with a zero normalizer.
    """
    w = np.empty(3)
    k = _draw3(logf[T], uniforms[T])
    if k < 0:
        return T
    path[T] = k + 1
    for t in range(T - 1, -1, -1):
        nxt = path[t + 1]
        if nxt == 1:
            w[0] = ownlx[t, 1]
            w[1] = NEG_INF
            w[2] = NEG_INF
        elif nxt == 2:
            w[0] = ownlx[t, 0]
            w[1] = log_stay
            w[2] = NEG_INF
        else:
            w[0] = NEG_INF
            w[1] = log_rem
            w[2] = 0.0
        w[0] += logf[t, 0]
        w[1] += logf[t, 1]
        w[2] += logf[t, 2]
        k = _draw3(w, uniforms[t])
        if k < 0:
            return t
        path[t] = k + 1
    return -1


@njit(cache=True)
def _apply_path(i, T, states, counts, path,
                rev_indptr, rev_indices, rev_edge, desc_idx):
    """Replace row i and update the infectious-neighbor counts for every
    time step where i's infectiousness changed."""
    for u in range(T):
        was = states[i, u] == 2
        now = path[u] == 2
        if was != now:
            delta = 1 if now else -1
            for e in range(rev_indptr[i], rev_indptr[i + 1]):
                j = rev_indices[e]
                counts[j, u, desc_idx[rev_edge[e]]] += delta
    for u in range(T + 1):
        states[i, u] = path[u]


@njit(cache=True)
def _sweep(N, T, states, counts, y, prevdet, frozen, gtab, tf, alpha,
           theta_logs, obs_code, log_stay, log_rem,
           rev_indptr, rev_indices, rev_edge, desc_idx, log_init,
           uniforms, logf, logpred, fps, ownlx, path):
    """One Gibbs sweep: exact path redraw for every unconstrained
    individual, in ascending id order.  Returns (code, i, t): code 0 on
    success, 1 for filter degeneracy, 2 for backward degeneracy."""
    for i in range(N):
        if frozen[i]:
            continue
        t_bad = _filter_full(i, T, states, counts, y, prevdet, gtab, tf,
                             alpha, theta_logs, obs_code, log_stay, log_rem,
                             rev_indptr, rev_indices, rev_edge, desc_idx,
                             log_init, logf, logpred, fps, ownlx)
        if t_bad >= 0:
            return (1, i, t_bad)
        t_bad = _backward(T, logf, ownlx, log_stay, log_rem, uniforms[i], path)
        if t_bad >= 0:
            return (2, i, t_bad)
        _apply_path(i, T, states, counts, path,
                    rev_indptr, rev_indices, rev_edge, desc_idx)
    return (0, -1, -1)


@njit(cache=True)
def _waic_pass(N, T, states, counts, y, prevdet, frozen, gtab, tf, alpha,
               theta_logs, obs_code, log_stay, log_rem,
               rev_indptr, rev_indices, rev_edge, desc_idx, log_init,
               logf, logpred, fps, ownlx, out_pm, out_cond):
    """Read-only filter pass computing the per-(i,t) log densities used by
    the two WAIC flavors: the partially marginalized mixture over the
    predictive probabilities, and the density at the sampled state.

    Constrained individuals have nothing to marginalize, so both values
    collapse to the observation density at the pinned state.
    """
    for i in range(N):
        if frozen[i]:
            for t in range(1, T + 1):
                lo = _log_obs(obs_code, y[i, t], states[i, t], prevdet[i, t],
                              theta_logs[0], theta_logs[1])
                out_pm[i, t] = lo
                out_cond[i, t] = lo
            continue
        t_bad = _filter_full(i, T, states, counts, y, prevdet, gtab, tf,
                             alpha, theta_logs, obs_code, log_stay, log_rem,
                             rev_indptr, rev_indices, rev_edge, desc_idx,
                             log_init, logf, logpred, fps, ownlx)
        if t_bad >= 0:
            return (1, i, t_bad)
        for t in range(1, T + 1):
            pd = prevdet[i, t]
            yv = y[i, t]
            acc = NEG_INF
            for s in range(3):
                lo = _log_obs(obs_code, yv, s + 1, pd,
                              theta_logs[0], theta_logs[1])
                acc = _lse2(acc, lo + logpred[t, s])
            out_pm[i, t] = acc
            out_cond[i, t] = _log_obs(obs_code, yv, states[i, t], pd,
                                      theta_logs[0], theta_logs[1])
    return (0, -1, -1)


@njit(cache=True)
def _rebuild_counts(states, counts, indptr, indices, desc_idx, T):
    """Recompute all infectious-neighbor bucket counts from scratch."""
    counts[:, :, :] = 0
    n = states.shape[0]
    for j in range(n):
        for e in range(indptr[j], indptr[j + 1]):
            k = indices[e]
            d = desc_idx[e]
            for u in range(T):
                if states[k, u] == 2:
                    counts[j, u, d] += 1


@njit(cache=True)
def _suffstats(states, y, prevdet, counts, tf, obs_code, cstay, infrows, inftf):
    """Sufficient statistics of the complete-data likelihood in v.

    Returns (n22, n23, ndet, nmiss, nstay, ninf); fills cstay with the
    covariate-weighted bucket counts summed over stay-susceptible cells
    and infrows/inftf with per-infection bucket rows and time factors.
    """
    n, tp1 = states.shape
    T = tp1 - 1
    nd = cstay.shape[0]
    n22 = 0
    n23 = 0
    ndet = 0
    nmiss = 0
    nstay = 0
    ninf = 0
    for d in range(nd):
        cstay[d] = 0.0
    for i in range(n):
        for t in range(1, T + 1):
            a = states[i, t - 1]
            b = states[i, t]
            if a == 2:
                if b == 2:
                    n22 += 1
                else:
                    n23 += 1
            elif a == 1:
                if b == 1:
                    nstay += 1
                    w = tf[t - 1]
                    for d in range(nd):
                        cstay[d] += w * counts[i, t - 1, d]
                else:
                    for d in range(nd):
                        infrows[ninf, d] = counts[i, t - 1, d]
                    inftf[ninf] = tf[t - 1]
                    ninf += 1
            if obs_code == 0:
                if states[i, t] == 2 and prevdet[i, t] == 0:
                    if y[i, t] == 1:
                        ndet += 1
                    else:
                        nmiss += 1
            elif obs_code == 1:
                if states[i, t] == 2:
                    if y[i, t] == 1:
                        ndet += 1
                    else:
                        nmiss += 1
    return (n22, n23, ndet, nmiss, nstay, ninf)


@njit(cache=True)
def _log_prior_one(code, p0, p1, p2, x):
    if code == 0:  # uniform(lo, hi)
        if x < p0 or x > p1:
            return NEG_INF
        return -math.log(p1 - p0)
    if code == 1:  # beta(a, b)
        if x <= 0.0 or x >= 1.0:
            return NEG_INF
        lbeta = math.lgamma(p0) + math.lgamma(p1) - math.lgamma(p0 + p1)
        return (p0 - 1.0) * math.log(x) + (p1 - 1.0) * math.log1p(-x) - lbeta
    if code == 2:  # gamma(shape, rate) on x - shift
        z = x - p2
        if z <= 0.0:
            return NEG_INF
        return p0 * math.log(p1) - math.lgamma(p0) + (p0 - 1.0) * math.log(z) - p1 * z
    if code == 3:  # inverse uniform on (1, inf)
        if x <= 1.0:
            return NEG_INF
        return -2.0 * math.log(x)
    # normal(mu, sd)
    z = (x - p0) / p1
    return -0.5 * z * z - math.log(p1) - 0.5 * math.log(2.0 * math.pi)


@njit(cache=True)
def _log_conditional(vec, free, prior_code, prior_params, kernel_code,
                     anchor, dmax, dmin, uniq, obs_code,
                     n22, n23, ndet, nmiss, nstay, ninf,
                     cstay, infrows, inftf, gbuf):
    """Conditional log posterior of the parameters given the states:
    log p(y, S | v) + log p(v), up to terms constant in v."""
    total = 0.0
    for p in range(vec.shape[0]):
        if not free[p]:
            continue
        lp = _log_prior_one(prior_code[p], prior_params[p, 0],
                            prior_params[p, 1], prior_params[p, 2], vec[p])
        if lp == NEG_INF:
            return NEG_INF
        total += lp

    theta = vec[0]
    m = vec[1]
    alpha = vec[2]
    if m <= 1.0 or alpha < 0.0:
        return NEG_INF

    if obs_code <= 1:
        if theta <= 0.0 or theta > 1.0:
            return NEG_INF
        if ndet > 0:
            total += ndet * math.log(theta)
        if nmiss > 0:
            if theta >= 1.0:
                return NEG_INF
            total += nmiss * math.log1p(-theta)

    total += n22 * math.log1p(-1.0 / m) - n23 * math.log(m)

    b0 = vec[3]
    b1 = vec[4] if vec.shape[0] > 4 else 0.0
    b2 = vec[5] if vec.shape[0] > 5 else 0.0
    if _kernel_values(gbuf, uniq, kernel_code, b0, b1, b2, anchor, dmax, dmin) != 0:
        return NEG_INF

    stay_rate = 0.0
    for d in range(uniq.shape[0]):
        stay_rate += gbuf[d] * cstay[d]
    total += -nstay * alpha - stay_rate

    for r in range(ninf):
        lam = 0.0
        for d in range(uniq.shape[0]):
            lam += gbuf[d] * infrows[r, d]
        x = alpha + inftf[r] * lam
        if x <= 0.0:
            return NEG_INF
        total += math.log(-math.expm1(-x))
    return total


@njit(cache=True)
def _pressures_from_column(prev_col, indptr, indices, edge_g, out):
    """Per-individual infection pressure given the previous state column."""
    for i in range(out.shape[0]):
        s = 0.0
        for e in range(indptr[i], indptr[i + 1]):
            if prev_col[indices[e]] == 2:
                s += edge_g[e]
        out[i] = s


@njit(cache=True)
def _sample_paths_batch(T, logf, ownlx, log_stay, log_rem, uniforms, out):
    for k in range(out.shape[0]):
        status = _backward(T, logf, ownlx, log_stay, log_rem, uniforms[k], out[k])
        if status >= 0:
            return status
    return -1


# ---------------------------------------------------------------------------
# Python-facing layer
# ---------------------------------------------------------------------------


@dataclass
class FilterWorkspace:
    """Per-individual filter tables (log scale), reused across sweeps."""

    log_filtered: np.ndarray  # (T+1, 3)
    log_predictive: np.ndarray  # (T+1, 3); row 0 unused
    log_forward_products: np.ndarray  # (T, 2): columns (infectious, not)
    own_trans: np.ndarray  # (T, 2): log p12 and log(1 - p12) for own moves

    @staticmethod
    def empty(T: int) -> "FilterWorkspace":
        return FilterWorkspace(
            np.full((T + 1, 3), NEG_INF),
            np.full((T + 1, 3), NEG_INF),
            np.zeros((max(T, 1), 2)),
            np.zeros((max(T, 1), 2)),
        )


@dataclass
class _ParamScalars:
    alpha: float
    theta_logs: np.ndarray  # (log theta, log (1-theta))
    log_stay: float
    log_rem: float
    gtab: np.ndarray


class EngineContext:
    """Arrays derived from (population, model spec, horizon) that the
    compiled kernels operate on.  Immutable after construction; the
    mutable per-chain state (states, counts) lives outside."""

    def __init__(self, population, spec: ModelSpec, T: int):
        if T < 1:
            raise InputError("horizon T must be >= 1")
        self.population = population
        self.spec = spec
        self.n = population.n
        self.T = T
        kernel = spec.kernel
        if kernel.variant in (KernelVariant.LINEAR, KernelVariant.QUADRATIC_CONSTRAINED):
            dmin, dmax = population.distance_range()
            kernel = kernel.with_range(dmin, dmax)
        self.kernel = kernel
        self.kernel_code = KERNEL_CODE[kernel.variant]
        self.obs_code = OBS_CODE[spec.observation]

        desc = population.descriptors(order=kernel.uses_order)
        uniq, inverse = np.unique(desc, return_inverse=True)
        if uniq.size == 0:
            uniq = np.ones(1)
            inverse = np.zeros(0, dtype=np.int64)
        if self.n * T * uniq.size > _MAX_COUNT_CELLS:
            raise InputError(
                "population has too many distinct neighbor distances for the "
                "pressure-count cache; use a grid or coarser neighborhoods"
            )
        self.uniq = uniq.astype(np.float64)
        self.desc_idx = inverse.astype(np.int32)
        self.indptr = population.indptr.astype(np.int64)
        self.indices = population.indices.astype(np.int32)
        self.rev_indptr = population.rev_indptr.astype(np.int64)
        self.rev_indices = population.rev_indices.astype(np.int32)
        self.rev_edge = population.rev_edge.astype(np.int64)

        if spec.covariates is not None:
            W = np.asarray(spec.covariates, dtype=float)
            if W.shape != (T + 1,):
                raise InputError("covariate series must have length T+1")
            self.tf = 1.0 - W[:T]
        else:
            self.tf = np.ones(T)

        initial = np.asarray(spec.initial, dtype=float)
        if initial.shape != (self.n, 3):
            raise InputError("initial distribution must be (N, 3)")
        with np.errstate(divide="ignore"):
            self.log_init = np.log(initial)

        # kernel constants for the compiled code (nan when unused)
        self.anchor = float(kernel.anchor)
        self.dmax = float(kernel.dmax) if kernel.dmax is not None else math.nan
        self.dmin = float(kernel.dmin) if kernel.dmin is not None else math.nan

    # -- parameter plumbing -------------------------------------------------

    def kernel_table(self, beta) -> np.ndarray:
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        if beta.shape != (self.kernel.n_params,):
            raise InputError(
                f"kernel takes {self.kernel.n_params} parameters, got {beta.shape}"
            )
        b = np.zeros(3)
        b[: beta.shape[0]] = beta
        g = np.empty(self.uniq.shape[0])
        status = _kernel_values(g, self.uniq, self.kernel_code, b[0], b[1], b[2],
                                self.anchor, self.dmax, self.dmin)
        if status != 0:
            raise ParameterDomainError(
                f"kernel parameters {beta} violate the {self.kernel.variant.value} domain"
            )
        return g

    def unpack(self, params: ModelParams) -> _ParamScalars:
        if params.m <= 1.0:
            raise ParameterDomainError(f"m must exceed 1, got {params.m}")
        if params.alpha < 0.0:
            raise ParameterDomainError("alpha must be >= 0")
        theta = params.theta
        if self.spec.observation.has_theta and not (0.0 < theta <= 1.0):
            raise ParameterDomainError(f"theta must be in (0,1], got {theta}")
        with np.errstate(divide="ignore"):
            theta_logs = np.array([
                np.log(theta) if theta > 0 else NEG_INF,
                np.log1p(-theta) if theta < 1 else NEG_INF,
            ])
        return _ParamScalars(
            alpha=float(params.alpha),
            theta_logs=theta_logs,
            log_stay=math.log1p(-1.0 / params.m),
            log_rem=-math.log(params.m),
            gtab=self.kernel_table(params.beta),
        )

    # -- mutable chain state -------------------------------------------------

    def new_counts(self, states: np.ndarray) -> np.ndarray:
        counts = np.zeros((self.n, self.T, self.uniq.shape[0]), dtype=np.int32)
        _rebuild_counts(states, counts, self.indptr, self.indices,
                        self.desc_idx, self.T)
        return counts

    def check_data(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.int8)
        if y.shape != (self.n, self.T + 1):
            raise InputError(f"detections must be (N, T+1) = {(self.n, self.T + 1)}")
        return y


def _as_state_matrix(states) -> np.ndarray:
    states = np.asarray(states, dtype=np.int8)
    if states.ndim != 2:
        raise InputError("state matrix must be N x (T+1)")
    return states


def _prepare(ctx: EngineContext, states, y, params):
    states = _as_state_matrix(states)
    y = ctx.check_data(y)
    counts = ctx.new_counts(states)
    prevdet = previously_detected(y)
    sc = ctx.unpack(params)
    return states, y, counts, prevdet, sc


def run_filter(i, states, y, params: ModelParams, spec: ModelSpec, population,
               workspace: FilterWorkspace | None = None) -> FilterWorkspace:
    """Full forward pass for individual i; returns the filled workspace."""
    ctx = EngineContext(population, spec, np.asarray(states).shape[1] - 1)
    states, y, counts, prevdet, sc = _prepare(ctx, states, y, params)
    ws = workspace or FilterWorkspace.empty(ctx.T)
    t_bad = _filter_full(i, ctx.T, states, counts, y, prevdet, sc.gtab, ctx.tf,
                         sc.alpha, sc.theta_logs, ctx.obs_code, sc.log_stay,
                         sc.log_rem, ctx.rev_indptr, ctx.rev_indices,
                         ctx.rev_edge, ctx.desc_idx, ctx.log_init,
                         ws.log_filtered, ws.log_predictive,
                         ws.log_forward_products, ws.own_trans)
    if t_bad >= 0:
        raise FilterDegeneracyError(i, t_bad)
    return ws


def forward_products(i, t, states, params: ModelParams, spec: ModelSpec,
                     population) -> tuple[float, float]:
    """Log forward products at time t, as (i infectious, i not infectious)."""
    ctx = EngineContext(population, spec, np.asarray(states).shape[1] - 1)
    states = _as_state_matrix(states)
    counts = ctx.new_counts(states)
    sc = ctx.unpack(params)
    if not 0 <= t < ctx.T:
        raise InputError(f"forward products exist for 0 <= t < T={ctx.T}")
    fp_inf, fp_non = _fp_pair(i, t, states, counts, sc.gtab, ctx.tf[t],
                              sc.alpha, sc.log_stay, sc.log_rem,
                              ctx.rev_indptr, ctx.rev_indices, ctx.rev_edge,
                              ctx.desc_idx)
    return float(fp_inf), float(fp_non)


def filter_t0(i, states, params, spec, population) -> np.ndarray:
    """Normalized log filtered row at t=0."""
    ctx = EngineContext(population, spec, np.asarray(states).shape[1] - 1)
    states = _as_state_matrix(states)
    counts = ctx.new_counts(states)
    sc = ctx.unpack(params)
    row = np.empty(3)
    _, _, logz = _row0(i, states, counts, sc.gtab, ctx.tf, sc.alpha,
                       sc.log_stay, sc.log_rem, ctx.rev_indptr,
                       ctx.rev_indices, ctx.rev_edge, ctx.desc_idx,
                       ctx.log_init, row)
    if logz == NEG_INF:
        raise FilterDegeneracyError(i, 0)
    return row


def filter_step(i, t, prev_row, states, y, params, spec, population) -> np.ndarray:
    """Normalized log filtered row at 1 <= t <= T-1."""
    ctx = EngineContext(population, spec, np.asarray(states).shape[1] - 1)
    if not 1 <= t <= ctx.T - 1:
        raise InputError(f"filter_step covers 1 <= t <= T-1={ctx.T - 1}")
    return _one_row(ctx, i, t, prev_row, states, y, params)


def filter_T(i, prev_row, states, y, params, spec, population) -> np.ndarray:
    """Normalized log filtered row at t=T (no forward products)."""
    ctx = EngineContext(population, spec, np.asarray(states).shape[1] - 1)
    return _one_row(ctx, i, ctx.T, prev_row, states, y, params)


def _one_row(ctx, i, t, prev_row, states, y, params):
    states, y, counts, prevdet, sc = _prepare(ctx, states, y, params)
    prev_row = np.asarray(prev_row, dtype=float)
    row = np.empty(3)
    pred = np.empty(3)
    ownlx = np.empty(2)
    _, _, logz = _rowt(i, t, ctx.T, states, counts, y, prevdet, sc.gtab,
                       ctx.tf, sc.alpha, sc.theta_logs, ctx.obs_code,
                       sc.log_stay, sc.log_rem, ctx.rev_indptr,
                       ctx.rev_indices, ctx.rev_edge, ctx.desc_idx,
                       prev_row, row, pred, ownlx)
    if logz == NEG_INF:
        raise FilterDegeneracyError(i, t)
    return row


def backward_sample(i, workspace: FilterWorkspace, params: ModelParams,
                    rng: np.random.Generator) -> np.ndarray:
    """Draw a full path from the filled workspace; monotone by construction."""
    T = workspace.log_filtered.shape[0] - 1
    path = np.zeros(T + 1, dtype=np.int8)
    log_stay = math.log1p(-1.0 / params.m)
    log_rem = -math.log(params.m)
    status = _backward(T, workspace.log_filtered, workspace.own_trans,
                       log_stay, log_rem, rng.random(T + 1), path)
    if status >= 0:
        raise FilterDegeneracyError(i, status, "backward pass hit a zero normalizer")
    return path


def update_individual(i, states, y, params, spec, population,
                      rng: np.random.Generator) -> np.ndarray:
    """Replace row i of `states` (in place) by an exact draw from its full
    conditional given all other rows; returns the matrix."""
    states = _as_state_matrix(states)
    ws = run_filter(i, states, y, params, spec, population)
    path = backward_sample(i, ws, params, rng)
    states[i, :] = path
    return states


def sample_paths(i, states, y, params, spec, population, n_draws: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Draw many independent paths for individual i (testing helper)."""
    ws = run_filter(i, states, y, params, spec, population)
    T = ws.log_filtered.shape[0] - 1
    out = np.zeros((n_draws, T + 1), dtype=np.int8)
    log_stay = math.log1p(-1.0 / params.m)
    log_rem = -math.log(params.m)
    status = _sample_paths_batch(T, ws.log_filtered, ws.own_trans, log_stay,
                                 log_rem, rng.random((n_draws, T + 1)), out)
    if status >= 0:
        raise FilterDegeneracyError(i, status)
    return out


def path_log_probability(workspace: FilterWorkspace, params: ModelParams,
                         path) -> float:
    """Exact log probability that backward sampling produces `path`."""
    path = np.asarray(path)
    T = workspace.log_filtered.shape[0] - 1
    logf = workspace.log_filtered
    log_stay = math.log1p(-1.0 / params.m)
    log_rem = -math.log(params.m)
    total = logf[T, path[T] - 1]
    for t in range(T - 1, -1, -1):
        nxt = path[t + 1]
        w = np.full(3, NEG_INF)
        if nxt == 1:
            w[0] = workspace.own_trans[t, 1]
        elif nxt == 2:
            w[0] = workspace.own_trans[t, 0]
            w[1] = log_stay
        else:
            w[1] = log_rem
            w[2] = 0.0
        w = w + logf[t]
        m = w.max()
        if m == NEG_INF:
            return NEG_INF
        logz = m + math.log(np.exp(w - m).sum())
        total += w[path[t] - 1] - logz
    return float(total)


def path_distribution(i, states, y, params, spec, population):
    """All 3^(T+1) paths and their exact probabilities under the
    backward-sampling law for individual i."""
    ws = run_filter(i, states, y, params, spec, population)
    T = ws.log_filtered.shape[0] - 1
    paths = np.array(
        np.meshgrid(*[[1, 2, 3]] * (T + 1), indexing="ij")
    ).reshape(T + 1, -1).T.astype(np.int8)
    logps = np.array([path_log_probability(ws, params, p) for p in paths])
    probs = np.where(logps == NEG_INF, 0.0, np.exp(logps))
    return paths, probs
