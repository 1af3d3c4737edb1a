"""Model core: kernels, densities, priors, and the complete-data joint."""

import itertools
import math

import numpy as np
import pytest

from hmmilm import (
    DiseaseState,
    KernelSpec,
    KernelVariant,
    ModelParams,
    ModelSpec,
    ObservationModel,
    Population,
    infection_probability,
    kernel_effect,
    log_joint,
    log_prior,
    obs_log_density,
    transition_matrix,
    transition_prob,
)
from hmmilm.errors import InputError, ParameterDomainError
from hmmilm.model import (
    Beta,
    InverseUniform,
    Normal,
    ShiftedGamma,
    Uniform,
    initial_state_distribution,
    log_transition_prob,
    previously_detected,
    validate_observation_matrix,
    validate_state_matrix,
)

ALL_OBS = list(ObservationModel)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def test_power_law_taylor_at_unit_distance_is_scale():
    spec = KernelSpec(KernelVariant.POWER_LAW_TAYLOR, anchor=1.35)
    assert kernel_effect(spec, [0.07, 3.0], 1.0) == pytest.approx(0.07, abs=1e-15)


def test_power_law_exact_value():
    # power law in distance with exponent beta1: beta0 * d^(-beta1); its
    # second-order expansion in beta1 around the anchor is the Taylor kernel
    spec = KernelSpec(KernelVariant.POWER_LAW_EXACT)
    assert kernel_effect(spec, [0.07, 3.0], 2.0) == pytest.approx(0.07 * 2.0 ** -3, rel=1e-14)
    assert kernel_effect(spec, [0.07, 3.0], 1.0) == pytest.approx(0.07, rel=1e-14)


def test_taylor_equals_exact_at_anchor():
    taylor = KernelSpec(KernelVariant.POWER_LAW_TAYLOR, anchor=1.35)
    exact = KernelSpec(KernelVariant.POWER_LAW_EXACT)
    for d in (0.5, 1.0, 1.8, 3.354):
        t = kernel_effect(taylor, [0.2, 1.35], d)
        e = kernel_effect(exact, [0.2, 1.35], d)
        assert t == pytest.approx(e, rel=1e-12)
        assert t == pytest.approx(0.2 * d ** -1.35, rel=1e-12)


def test_taylor_is_always_positive():
    spec = KernelSpec(KernelVariant.POWER_LAW_TAYLOR, anchor=1.35)
    rng = np.random.default_rng(0)
    for _ in range(200):
        b1 = rng.uniform(0.0, 20.0)
        d = rng.uniform(0.1, 5.0)
        assert kernel_effect(spec, [0.3, b1], d) > 0.0


def test_neighborhood_order_kernel():
    spec = KernelSpec(KernelVariant.NEIGHBORHOOD_ORDER)
    beta = [0.3, 0.2, 0.1]
    assert kernel_effect(spec, beta, 1) == 0.3
    assert kernel_effect(spec, beta, 3) == 0.1
    with pytest.raises(InputError):
        kernel_effect(spec, beta, 4)
    with pytest.raises(InputError):
        kernel_effect(spec, beta, 1.5)


def test_linear_kernel_needs_two_params_and_dmax():
    spec = KernelSpec(KernelVariant.LINEAR, dmax=3.36)
    assert kernel_effect(spec, [0.1, 0.2], 3.36) == pytest.approx(0.1)
    assert kernel_effect(spec, [0.1, 0.2], 0.5) == pytest.approx(0.1 + 0.2 * 2.86)
    with pytest.raises(InputError):
        kernel_effect(spec, [0.1], 1.0)


def test_quadratic_constraint_violation_raises():
    spec = KernelSpec(KernelVariant.QUADRATIC_CONSTRAINED, dmax=3.36, dmin=0.5)
    # -b1 - 2*b2*(dmax-dmin) must be negative; b2 very negative violates it
    with pytest.raises(ParameterDomainError):
        kernel_effect(spec, [0.1, 0.1, -5.0], 1.0)
    value = kernel_effect(spec, [0.1, 0.5, 0.05], 1.0)
    assert value == pytest.approx(0.1 + 0.5 * 2.36 + 0.05 * 2.36 ** 2)


def test_quadratic_kernel_nonincreasing_on_grid():
    spec = KernelSpec(KernelVariant.QUADRATIC_CONSTRAINED, dmax=3.36, dmin=0.5)
    rng = np.random.default_rng(1)
    grid = np.linspace(0.5, 3.36, 100)
    for _ in range(50):
        beta = [rng.uniform(0.01, 1.0), rng.uniform(0.01, 20.0), rng.normal(0, 5)]
        if not spec.constraints_ok(np.array(beta)):
            continue
        values = [kernel_effect(spec, beta, d) for d in grid]
        assert np.all(np.diff(values) <= 1e-12)


def test_homogeneous_kernel_ignores_distance():
    spec = KernelSpec(KernelVariant.HOMOGENEOUS_WARD_CLOSURE)
    assert kernel_effect(spec, [0.4], 0.5) == 0.4
    assert kernel_effect(spec, [0.4], 99.0) == 0.4


# ---------------------------------------------------------------------------
# Infection probability and transitions
# ---------------------------------------------------------------------------


def test_infection_probability_values():
    assert infection_probability(0.0, 0.0) == 0.0
    assert infection_probability(0.015, 0.0) == pytest.approx(1.0 - math.exp(-0.015), rel=1e-14)
    assert infection_probability(0.0, 1e9) == pytest.approx(1.0)


def test_infection_probability_monotone_and_multiplicative():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, s = rng.uniform(0, 2), rng.uniform(0, 2)
        p = infection_probability(a, s)
        assert infection_probability(a + 0.1, s) > p
        assert infection_probability(a, s + 0.1) > p
        assert 1.0 - p == pytest.approx(math.exp(-a) * math.exp(-s), rel=1e-12)


def test_transition_matrix_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p12 = rng.uniform(0.0, 0.999999)
        m = rng.uniform(1.0001, 50.0)
        gamma = transition_matrix(p12, m)
        assert np.allclose(gamma.sum(axis=1), 1.0, atol=1e-12)


def test_transition_examples():
    assert transition_prob(3, 3, 0.2, 5.0) == 1.0
    assert transition_prob(2, 3, 0.99, 16.0) == pytest.approx(1.0 / 16.0)
    assert transition_prob(1, 3, 0.3, 2.5) == 0.0
    with pytest.raises(ParameterDomainError):
        transition_prob(1, 1, 0.1, 1.0)
    with pytest.raises(ParameterDomainError):
        transition_matrix(1.0, 3.0)


def test_log_transition_matches_probability_space():
    rng = np.random.default_rng(4)
    for _ in range(100):
        rate = rng.uniform(0.0, 3.0)
        m = rng.uniform(1.1, 30.0)
        p12 = infection_probability(0.0, rate)
        for frm, to in itertools.product((1, 2, 3), repeat=2):
            dense = transition_prob(frm, to, p12, m)
            lt = log_transition_prob(frm, to, rate, m)
            if dense == 0.0:
                assert lt == -math.inf
            else:
                assert lt == pytest.approx(math.log(dense), rel=1e-10)


# ---------------------------------------------------------------------------
# Observation model
# ---------------------------------------------------------------------------


def test_obs_density_examples():
    sd = ObservationModel.SINGLE_DETECTION
    assert obs_log_density(sd, 1, 2, False, 0.55) == pytest.approx(math.log(0.55))
    assert obs_log_density(sd, 1, 1, False, 0.55) == -math.inf
    assert obs_log_density(ObservationModel.KNOWN_INFECTION, 0, 2, False, 1.0) == -math.inf


def test_obs_density_normalizes_over_y():
    for obs in ALL_OBS:
        for state in (1, 2, 3):
            for prev in (False, True):
                total = sum(
                    math.exp(obs_log_density(obs, yv, state, prev, 0.37))
                    for yv in (0, 1)
                )
                assert total == pytest.approx(1.0, abs=1e-12), (obs, state, prev)


def test_single_detection_blocks_redetection():
    sd = ObservationModel.SINGLE_DETECTION
    assert obs_log_density(sd, 1, 2, True, 0.9) == -math.inf
    assert obs_log_density(sd, 0, 2, True, 0.9) == 0.0


def test_continuous_testing_ignores_history():
    ct = ObservationModel.CONTINUOUS_TESTING
    assert obs_log_density(ct, 1, 2, True, 0.7) == pytest.approx(math.log(0.7))


def test_known_removal_density():
    kr = ObservationModel.KNOWN_REMOVAL
    assert obs_log_density(kr, 1, 3, False, 1.0) == 0.0
    assert obs_log_density(kr, 0, 3, False, 1.0) == -math.inf
    assert obs_log_density(kr, 1, 2, False, 1.0) == -math.inf


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------


def test_prior_values():
    assert Uniform(1, 20).log_density(16.0) == pytest.approx(math.log(1.0 / 19.0))
    assert InverseUniform().log_density(0.5) == -math.inf
    assert InverseUniform().log_density(2.0) == pytest.approx(math.log(0.25))
    assert Uniform(0, 1).log_density(1.5) == -math.inf


def test_beta_and_gamma_priors_integrate_to_one():
    from scipy import integrate

    beta = Beta(40.0, 60.0)
    val, _ = integrate.quad(lambda x: math.exp(beta.log_density(x)), 0.0, 1.0)
    assert val == pytest.approx(1.0, rel=1e-8)
    sg = ShiftedGamma(2.0, 2.0 / 5.75, shift=1.0)
    val, _ = integrate.quad(lambda x: math.exp(sg.log_density(x)), 1.0, 500.0)
    assert val == pytest.approx(1.0, rel=1e-6)
    norm = Normal(0.0, 5.0)
    val, _ = integrate.quad(lambda x: math.exp(norm.log_density(x)), -60.0, 60.0)
    assert val == pytest.approx(1.0, rel=1e-8)


def test_inverse_uniform_integrates_to_one():
    from scipy import integrate

    iu = InverseUniform()
    val, _ = integrate.quad(lambda x: math.exp(iu.log_density(x)), 1.0, np.inf)
    assert val == pytest.approx(1.0, rel=1e-8)


def test_log_prior_sums_and_masks():
    priors = {
        "theta": Uniform(0, 1),
        "m": Uniform(1, 20),
        "alpha": Uniform(0, 1),
        "beta0": Uniform(0, 1),
        "beta1": Uniform(0, 20),
    }
    params = ModelParams(0.5, 16.0, 0.1, [0.07, 3.0])
    expected = math.log(1.0) + math.log(1 / 19) + 0.0 + 0.0 + math.log(1 / 20)
    assert log_prior(params, priors) == pytest.approx(expected)
    # fixed parameters contribute nothing even when out of support
    masked = ModelParams(0.5, 16.0, 5.0, [0.07, 3.0])
    assert log_prior(masked, priors, fixed={"alpha": 5.0}) == pytest.approx(
        expected - 0.0
    )
    assert log_prior(masked, priors) == -math.inf


def test_prior_sampling_in_support():
    rng = np.random.default_rng(8)
    for prior, check in [
        (Uniform(1, 20), lambda x: 1 <= x <= 20),
        (Beta(40, 60), lambda x: 0 < x < 1),
        (ShiftedGamma(2.0, 0.5, 1.0), lambda x: x > 1),
        (InverseUniform(), lambda x: x > 1),
        (Normal(0, 5), lambda x: np.isfinite(x)),
    ]:
        draws = [prior.sample(rng) for _ in range(200)]
        assert all(check(x) for x in draws)
        assert all(np.isfinite(prior.log_density(x)) for x in draws)


# ---------------------------------------------------------------------------
# Matrices and the joint density
# ---------------------------------------------------------------------------


def test_state_matrix_validation():
    validate_state_matrix(np.array([[1, 2, 3], [1, 1, 1]]))
    with pytest.raises(InputError):
        validate_state_matrix(np.array([[2, 1, 1]]))
    with pytest.raises(InputError):
        validate_state_matrix(np.array([[1, 3, 2]]))
    with pytest.raises(InputError):
        validate_state_matrix(np.array([[0, 1, 2]]))


def test_observation_matrix_validation():
    validate_observation_matrix(np.array([[0, 1, 0]]), ObservationModel.SINGLE_DETECTION)
    with pytest.raises(InputError):
        validate_observation_matrix(np.array([[1, 0, 0]]), ObservationModel.SINGLE_DETECTION)
    with pytest.raises(InputError):
        validate_observation_matrix(np.array([[0, 1, 1]]), ObservationModel.KNOWN_REMOVAL)
    validate_observation_matrix(np.array([[0, 1, 1]]), ObservationModel.CONTINUOUS_TESTING)


def _single_spec(n, obs=ObservationModel.SINGLE_DETECTION, p2=0.0):
    init = initial_state_distribution(n, p2)
    return ModelSpec(KernelSpec(KernelVariant.POWER_LAW_EXACT), obs, {}, init)


def test_log_joint_trivial_cases():
    pop = Population.complete(1)
    spec = _single_spec(1)
    params = ModelParams(0.5, 3.0, 0.0, [0.1, 2.0])
    S = np.array([[1, 1]])
    y = np.zeros((1, 2), dtype=int)
    assert log_joint(S, y, params, spec, pop) == 0.0
    assert log_joint(np.array([[1, 3]]), y, params, spec, pop) == -math.inf


def test_log_joint_dimension_mismatch():
    pop = Population.complete(2)
    spec = _single_spec(2)
    params = ModelParams(0.5, 3.0, 0.0, [0.1, 2.0])
    with pytest.raises(InputError):
        log_joint(np.ones((3, 3), dtype=int), np.zeros((3, 3), dtype=int), params, spec, pop)


def test_log_joint_matches_independent_factor_evaluator():
    """N=2, T=2 joint equals an explicitly re-derived factor-by-factor sum."""
    pop = Population.grid(1, 2, 1.0, 0.5, order=1)
    init = initial_state_distribution(2, 0.4)
    spec = ModelSpec(KernelSpec(KernelVariant.POWER_LAW_EXACT),
                     ObservationModel.SINGLE_DETECTION, {}, init)
    params = ModelParams(0.6, 2.5, 0.05, [0.3, 2.0])
    S = np.array([[2, 2, 3], [1, 2, 2]], dtype=np.int8)
    y = np.array([[0, 1, 0], [0, 0, 1]], dtype=np.int8)

    d01 = 0.5
    expected = math.log(init[0, 1]) + math.log(init[1, 0])
    prev = previously_detected(y)
    for t in (1, 2):
        for i in (0, 1):
            rate = params.alpha
            j = 1 - i
            if S[j, t - 1] == 2:
                rate += params.beta[0] * d01 ** (-params.beta[1])
            p12 = 1.0 - math.exp(-rate)
            row = {1: [1 - p12, p12, 0.0],
                   2: [0.0, 1 - 1 / params.m, 1 / params.m],
                   3: [0.0, 0.0, 1.0]}[int(S[i, t - 1])]
            expected += math.log(row[int(S[i, t]) - 1])
            if S[i, t] == 2 and not prev[i, t]:
                expected += math.log(params.theta if y[i, t] else 1 - params.theta)
            else:
                assert y[i, t] == 0 or S[i, t] == 2
    assert log_joint(S, y, params, spec, pop) == pytest.approx(expected, rel=1e-12)


def test_joint_density_normalizes_by_enumeration():
    """Sum of exp(log_joint) over all state matrices and detection patterns
    is exactly 1 for N=1, T=2."""
    pop = Population.complete(1)
    init = initial_state_distribution(1, 0.25)
    for obs in ALL_OBS:
        spec = ModelSpec(KernelSpec(KernelVariant.POWER_LAW_EXACT), obs, {}, init)
        params = ModelParams(0.55, 3.0, 0.1, [0.1, 2.0])
        total = 0.0
        for path in itertools.product((1, 2, 3), repeat=3):
            for dets in itertools.product((0, 1), repeat=2):
                S = np.array([path], dtype=np.int8)
                y = np.array([[0, *dets]], dtype=np.int8)
                lp = log_joint(S, y, params, spec, pop)
                if lp > -math.inf:
                    total += math.exp(lp)
        assert total == pytest.approx(1.0, abs=1e-12), obs


def test_disease_state_enum():
    assert [s.value for s in DiseaseState] == [1, 2, 3]
    assert DiseaseState.REMOVED == 3
