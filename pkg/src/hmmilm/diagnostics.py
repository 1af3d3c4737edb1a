"""Convergence diagnostics, WAIC model comparison, posterior summaries.

Two WAIC flavors are supported.  The conditional version scores
p(y_it | S_it, history, theta) at the sampled states.  The partially
marginalized version instead scores

    p(y_it | S_(-i)(0:t), y_i(0:t-1), v)
        = sum_k p(y_it | S_it = k, history, theta) * predictive_t(k),

obtained from the individual forward filter, which marginalizes all of
individual i's states and the other individuals' future states.  The
fully marginal density would need the joint 3^N-state forward filter and
is not computable at realistic population sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import run_filter
from .errors import InputError
from .model import ModelParams, ModelSpec, NEG_INF, obs_log_density, previously_detected

_Q_LO, _Q_HI = 0.025, 0.975


# ---------------------------------------------------------------------------
# WAIC
# ---------------------------------------------------------------------------


@dataclass
class WaicResult:
    lppd: float
    p_waic: float
    waic: float
    pointwise_lppd: np.ndarray
    pointwise_pwaic: np.ndarray
    n_neg_inf: np.ndarray

    def __post_init__(self):
        # definitional identity, kept explicit so serialization errors
        # surface; NaN propagates from flagged zero-density cells
        identity = self.waic == -2.0 * (self.lppd - self.p_waic)
        assert identity or (math.isnan(self.waic) and math.isnan(self.p_waic))


class WaicAccumulator:
    """Streaming per-cell accumulator for WAIC pointwise log densities.

    Keeps a running log-sum-exp (for the log pointwise predictive
    density) and one-pass variance statistics, so draws never need to be
    stored.  Cells hit by a -inf log density are counted and flagged;
    their variance is undefined and propagates as NaN.
    """

    def __init__(self, shape):
        self.n = 0
        self.mx = np.full(shape, NEG_INF)
        self.sumexp = np.zeros(shape)
        self.n_fin = np.zeros(shape, dtype=np.int64)
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def update(self, logp: np.ndarray) -> None:
        logp = np.asarray(logp, dtype=float)
        self.n += 1
        new_mx = np.maximum(self.mx, logp)
        ok = new_mx > NEG_INF
        with np.errstate(invalid="ignore"):
            scale = np.where(ok, np.exp(np.where(ok, self.mx - new_mx, 0.0)), 0.0)
            term = np.where(logp > NEG_INF, np.exp(np.where(ok, logp - new_mx, 0.0)), 0.0)
        self.sumexp = self.sumexp * scale + term
        self.mx = new_mx
        fin = logp > NEG_INF
        self.n_fin += fin
        delta = np.where(fin, logp - self.mean, 0.0)
        cnt = np.maximum(self.n_fin, 1)
        self.mean += delta / cnt
        self.m2 += delta * np.where(fin, logp - self.mean, 0.0)

    def merge(self, other: "WaicAccumulator") -> "WaicAccumulator":
        out = WaicAccumulator(self.mx.shape)
        out.n = self.n + other.n
        out.mx = np.maximum(self.mx, other.mx)
        ok = out.mx > NEG_INF
        with np.errstate(invalid="ignore"):
            for src in (self, other):
                scale = np.where(ok & (src.mx > NEG_INF),
                                 np.exp(np.where(ok, src.mx - out.mx, 0.0)), 0.0)
                out.sumexp = out.sumexp + src.sumexp * scale
        na, nb = self.n_fin, other.n_fin
        out.n_fin = na + nb
        tot = np.maximum(out.n_fin, 1)
        delta = other.mean - self.mean
        out.mean = np.where(out.n_fin > 0, (na * self.mean + nb * other.mean) / tot, 0.0)
        out.m2 = self.m2 + other.m2 + delta * delta * (na * nb / tot)
        return out

    def assemble(self) -> WaicResult:
        if self.n < 2:
            raise InputError("WAIC needs at least 2 retained draws")
        with np.errstate(divide="ignore"):
            lppd_cell = np.where(
                self.sumexp > 0, self.mx + np.log(np.maximum(self.sumexp, 1e-300)), NEG_INF
            ) - math.log(self.n)
        complete = self.n_fin == self.n
        pwaic_cell = np.where(complete, self.m2 / max(self.n - 1, 1), np.nan)
        lppd = float(lppd_cell.sum())
        p_waic = float(pwaic_cell.sum())
        return WaicResult(
            lppd=lppd,
            p_waic=p_waic,
            waic=-2.0 * (lppd - p_waic),
            pointwise_lppd=lppd_cell,
            pointwise_pwaic=pwaic_cell,
            n_neg_inf=(self.n - self.n_fin).astype(np.int64),
        )


def waic_assemble(pointwise: np.ndarray) -> WaicResult:
    """Reference WAIC assembly from a dense (n_draws, ...) matrix of
    pointwise log densities; lppd = sum log mean, p_waic = sum sample
    variance (n-1 denominator)."""
    pointwise = np.asarray(pointwise, dtype=float)
    if pointwise.ndim < 2 or pointwise.shape[0] < 2:
        raise InputError("WAIC needs at least 2 retained draws")
    acc = WaicAccumulator(pointwise.shape[1:])
    for row in pointwise:
        acc.update(row)
    return acc.assemble()


def conditional_waic(pointwise: np.ndarray) -> WaicResult:
    """WAIC from conditional pointwise densities p(y_it | S_it^[q], history,
    theta^[q]) evaluated at the sampled states.  Assembly is identical to
    `waic_assemble`; only the pointwise source differs (see
    PosteriorArchive.waic("conditional") for the streaming path)."""
    return waic_assemble(pointwise)


def waic_pm_pointwise(i, t, states, y, params: ModelParams, spec: ModelSpec,
                      population) -> float:
    """Partially marginalized pointwise log density for cell (i, t):
    the 3-term mixture of observation densities over the predictive
    probabilities from individual i's forward filter."""
    states = np.asarray(states)
    T = states.shape[1] - 1
    if not 1 <= t <= T:
        raise InputError("pointwise densities are defined for 1 <= t <= T")
    ws = run_filter(i, states, y, params, spec, population)
    prev = previously_detected(np.asarray(y))
    acc = NEG_INF
    for s in (1, 2, 3):
        lo = obs_log_density(spec.observation, int(np.asarray(y)[i, t]), s,
                             bool(prev[i, t]), params.theta)
        acc = float(np.logaddexp(acc, lo + ws.log_predictive[t, s - 1]))
    return acc


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------


def gelman_rubin(chains) -> float:
    """Potential scale reduction factor over same-length chains.

    B = 0 (identical chains) gives exactly 1; all-constant chains with
    between-chain spread give +inf.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2 or chains.shape[0] < 2 or chains.shape[1] < 2:
        raise InputError("gelman_rubin needs >= 2 chains of length >= 2")
    n = chains.shape[1]
    W = float(np.mean(np.var(chains, axis=1, ddof=1)))
    b_over_n = float(np.var(np.mean(chains, axis=1), ddof=1))
    if W == 0.0:
        return 1.0 if b_over_n == 0.0 else float("inf")
    psrf = math.sqrt(((n - 1.0) / n * W + b_over_n) / W)
    return max(1.0, psrf)


def effective_sample_size(draws) -> float:
    """n / (1 + 2 sum rho_k) with Geyer's initial-positive-sequence
    truncation of the paired autocorrelations; clipped to (0, n].
    Returns 0 for a constant sequence."""
    x = np.asarray(draws, dtype=float)
    if x.ndim != 1 or x.size < 10:
        raise InputError("effective_sample_size needs >= 10 draws")
    n = x.size
    x = x - x.mean()
    var0 = float(np.dot(x, x)) / n
    if var0 == 0.0:
        return 0.0
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n].real / n
    rho = acov / acov[0]
    pair_sum = 0.0
    m = 0
    while 2 * m + 1 < n:
        gamma = rho[2 * m] + rho[2 * m + 1]
        if gamma <= 0.0:
            break
        pair_sum += gamma
        m += 1
    tau = max(2.0 * pair_sum - 1.0, 1e-12)
    return float(min(n / tau, n))


@dataclass
class ConvergenceReport:
    rows: list  # (param, gelman_rubin, ess, passed)
    gr_threshold: float
    ess_threshold: float

    @property
    def passed(self) -> bool:
        return all(r[3] for r in self.rows)


def convergence_report(archive, gr_threshold: float = 1.05,
                       ess_threshold: float = 1000.0) -> ConvergenceReport:
    """Per-parameter Gelman-Rubin and total ESS over post-burn-in draws.

    Fixed (masked) parameters are excluded, matching the convention of
    checking estimated parameters only.
    """
    rows = []
    for p, name in enumerate(archive.names):
        if not archive.free[p]:
            continue
        post = archive.post_burn(p)
        single_chain = post.shape[0] < 2
        gr = float("nan") if single_chain else gelman_rubin(post)
        ess = float(sum(effective_sample_size(c) for c in post))
        gr_ok = single_chain or gr < gr_threshold
        rows.append((name, gr, ess, bool(gr_ok and ess > ess_threshold)))
    return ConvergenceReport(rows, gr_threshold, ess_threshold)


# ---------------------------------------------------------------------------
# Posterior summaries
# ---------------------------------------------------------------------------


def quantile_interval(draws, lo: float = _Q_LO, hi: float = _Q_HI):
    draws = np.asarray(draws, dtype=float)
    return (
        float(np.quantile(draws, 0.5)),
        float(np.quantile(draws, lo)),
        float(np.quantile(draws, hi)),
    )


@dataclass
class StateSummary:
    probabilities: np.ndarray  # (N, T+1, 3) posterior state frequencies
    functionals: list = field(default_factory=list)  # (name, median, lo, hi)


def summarize_states(archive) -> StateSummary:
    """Posterior per-(i,t) state probabilities and registered-functional
    medians and 95% quantile intervals."""
    if archive.n_state_draws == 0:
        raise InputError("archive holds no retained state draws")
    probs = archive.state_counts / float(archive.n_state_draws)
    rows = []
    for name, per_chain in archive.functionals.items():
        pooled = np.concatenate([np.asarray(c) for c in per_chain])
        med, lo, hi = quantile_interval(pooled)
        rows.append((name, med, lo, hi))
    return StateSummary(probs, rows)


def r0(beta, m, n: int):
    """Basic reproduction number (n - 1) * beta * m under homogeneous
    mixing; `beta` and `m` may be posterior-draw vectors."""
    if n < 1:
        raise InputError("population size must be >= 1")
    return (n - 1) * np.asarray(beta, dtype=float) * np.asarray(m, dtype=float)


def r0_summary(archive, population_size: int):
    """Posterior median and 95% interval of R0; homogeneous kernels only."""
    if archive.kernel_variant != "homogeneous":
        raise InputError("R0 = (N-1)*beta*m applies to the homogeneous-mixing kernel only")
    beta = archive.pooled_post_burn("beta0")
    m = archive.pooled_post_burn("m")
    return quantile_interval(r0(beta, m, population_size))
