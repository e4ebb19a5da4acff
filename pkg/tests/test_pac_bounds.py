import itertools
import math

import numpy as np
import pytest
import torch

from factories import small_model, synthetic_dataset
from pacdrgp.domain.errors import DomainError, MGFUndefinedError
from pacdrgp.domain.optimization import TrainingConfig, train
from pacdrgp.domain.pac_bounds import (
    BoundCurve,
    BoundInputs,
    BoundVariant,
    LambdaRule,
    LayerBoundInputs,
    QuadraticForm,
    bound_inputs_from_model,
    capital_L,
    capital_L_terms,
    consistency_asymptote,
    covering_extension,
    covering_number_bound,
    evaluate_variant,
    intersection_lower_bound,
    lipschitz_estimate,
    oracle_risk,
    qfg_mgf,
    revarb_from_risk,
    theorem2_bound,
    theorem3_gap_bound,
    theorem5_oracle_bound,
    two_sided,
    variance_cov_inputs,
)
from pacdrgp.domain.psi_statistics import VariationalParams
from pacdrgp.domain.revarb_model import (
    SpectrumMode,
    build_inputs,
    generate_quasi_real,
    init_model,
    per_sample_nll,
    variational_bound,
)
from pacdrgp.domain.spectral_features import feature_matrix
from pacdrgp.domain.tensors import DTYPE


def _random_layer(rng: np.random.Generator, num_states: int, lipschitz: float | None = None) -> LayerBoundInputs:
    factor = rng.standard_normal((num_states, num_states)) * rng.uniform(0.1, 1.0)
    cov = factor @ factor.T / num_states
    state_vars = np.diag(cov) + rng.uniform(0.01, 0.5, size=num_states)
    return LayerBoundInputs(
        state_vars=state_vars,
        cov=cov,
        sigma_noise=float(rng.uniform(0.8, 1.5)),
        lipschitz=float(rng.uniform(0.0, 2.0)) if lipschitz is None else lipschitz,
        delta=float(rng.integers(1, 4)),
        noise_free_var_sum=float(np.diag(cov).sum()),
    )


def _random_inputs(seed: int, num_states: int = 5, num_layers: int = 2, kl: float = 3.0, tau: float = 0.5) -> BoundInputs:
    rng = np.random.default_rng(seed)
    return BoundInputs(
        layers=tuple(_random_layer(rng, num_states) for _ in range(num_layers)),
        kl=kl,
        tau=tau,
        big_lipschitz=2.0,
        input_dim=2,
    )


def _zero_inputs(num_states: int = 4, tau: float = 1.0) -> BoundInputs:
    layer = LayerBoundInputs(
        state_vars=np.zeros(num_states),
        cov=np.zeros((num_states, num_states)),
        sigma_noise=0.5,
        lipschitz=0.0,
        delta=1.0,
    )
    return BoundInputs(layers=(layer, layer), kl=0.0, tau=tau)


def test_mgf_of_degenerate_form_is_zero() -> None:
    q = QuadraticForm(E=np.zeros((3, 3)), e=np.zeros(3), const=0.0, Sigma=np.eye(3))
    for lam in (0.1, 1.0, 10.0):
        assert qfg_mgf(q, lam) == 0.0


def test_mgf_of_linear_form_is_gaussian_exponent() -> None:
    s = 1.7
    q = QuadraticForm(E=[[0.0]], e=[1.0], const=0.0, Sigma=[[s**2]])
    for lam in (0.05, 0.5, 2.0):
        assert qfg_mgf(q, lam) == pytest.approx(lam**2 * s**2 / 2.0, rel=1e-12)


def test_mgf_of_chi_square() -> None:
    # Q = I^2 with I ~ N(0, 1): E[exp(lam Q)] = (1 - 2 lam)^(-1/2)
    q = QuadraticForm(E=[[1.0]], e=[0.0], const=0.5, Sigma=[[1.0]])
    assert qfg_mgf(q, 0.2) == pytest.approx(-0.5 * math.log(0.6) + 0.1, rel=1e-12)


def test_mgf_undefined_beyond_the_pole() -> None:
    q = QuadraticForm(E=np.eye(2), e=np.zeros(2), const=0.0, Sigma=np.eye(2))
    with pytest.raises(MGFUndefinedError, match="lambda=0.6"):
        qfg_mgf(q, 0.6)
    with pytest.raises(DomainError):
        qfg_mgf(q, 0.0)


def test_mgf_accepts_singular_covariance() -> None:
    q = QuadraticForm(E=np.eye(2), e=[1.0, 1.0], const=0.0, Sigma=[[1.0, 0.0], [0.0, 0.0]])
    lam = 0.1
    expected = -0.5 * math.log(1.0 - 2.0 * lam) + 0.5 * lam**2 / (1.0 - 2.0 * lam)
    assert qfg_mgf(q, lam) == pytest.approx(expected, rel=1e-12)


def test_mgf_is_convex_in_lambda() -> None:
    rng = np.random.default_rng(5)
    for _ in range(10):
        factor = rng.standard_normal((3, 3))
        raw = rng.standard_normal((3, 3))
        q = QuadraticForm(E=0.5 * (raw + raw.T), e=rng.standard_normal(3), const=0.3, Sigma=factor @ factor.T / 3)
        step = 1e-3
        for lam in (0.01, 0.02, 0.04):
            second = qfg_mgf(q, lam + step) - 2.0 * qfg_mgf(q, lam) + qfg_mgf(q, lam - step)
            assert second >= -1e-8


def test_quadratic_form_validation() -> None:
    with pytest.raises(DomainError, match="E must be symmetric"):
        QuadraticForm(E=[[0.0, 1.0], [0.0, 0.0]], e=[0.0, 0.0], const=0.0, Sigma=np.eye(2))
    with pytest.raises(DomainError, match="semidefinite"):
        QuadraticForm(E=np.eye(2), e=[0.0, 0.0], const=0.0, Sigma=-np.eye(2))


def test_capital_L_with_zero_covariance_keeps_only_variance_term() -> None:
    layer = LayerBoundInputs(state_vars=[0.2, 0.3], cov=np.zeros((2, 2)), sigma_noise=0.5, lipschitz=1.3, delta=2.0)
    inputs = BoundInputs(layers=(layer,), kl=0.0)

    assert capital_L(inputs, 3.0, 10) == pytest.approx(3.0 * 0.5 / (2.0 * 0.25), rel=1e-14)


def test_capital_L_without_lipschitz_has_no_third_term() -> None:
    inputs = _random_inputs(1)
    flat = BoundInputs(
        layers=tuple(
            LayerBoundInputs(
                state_vars=layer.state_vars, cov=layer.cov, sigma_noise=layer.sigma_noise, lipschitz=0.0, delta=layer.delta
            )
            for layer in inputs.layers
        ),
        kl=inputs.kl,
    )

    terms = capital_L_terms(flat, 7.0, 50)

    assert all(term.third == 0.0 for term in terms)
    assert capital_L(flat, 7.0, 50) == pytest.approx(sum(t.first + t.second for t in terms))


def test_capital_L_matches_scalar_reference() -> None:
    v, c, sigma, S, delta = 0.7, 0.4, 0.6, 1.5, 2.0
    layer = LayerBoundInputs(state_vars=[v], cov=[[c]], sigma_noise=sigma, lipschitz=S, delta=delta)
    inputs = BoundInputs(layers=(layer,), kl=0.0)
    for lam, n in ((3.0, 9), (100.0, 10_000), (1e3, 1_000)):
        x = lam * c / (n * sigma**2)
        expected = (
            lam * v / (2.0 * sigma**2)
            - 0.5 * n * math.log1p(x)
            + 0.5 * n * (lam * S / (n * delta * sigma**2)) ** 2 * c / (1.0 + x)
        )
        assert capital_L(inputs, lam, n) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_capital_L_is_nonnegative() -> None:
    for seed in range(120):
        inputs = _random_inputs(seed, num_states=4)
        rng = np.random.default_rng(seed + 500)
        n = int(rng.integers(1, 100_000))
        lam = float(rng.uniform(0.1, 2.0)) * math.sqrt(n)
        assert capital_L(inputs, lam, n) >= -1e-9


def test_scaled_log_converges_to_its_argument() -> None:
    for x in (0.0, 0.3, 2.0, 11.0):
        for exponent in range(2, 11):
            root = math.sqrt(10.0**exponent)
            assert abs(root * math.log1p(x / root) - x) <= x**2 / (2.0 * root) * 1.01


def test_capital_L_per_root_n_approaches_asymptote() -> None:
    inputs = _random_inputs(3)
    asymptote = consistency_asymptote(inputs)
    gaps = [abs(capital_L(inputs, math.sqrt(n), n) / math.sqrt(n) - asymptote) for n in (10**2, 10**4, 10**6, 10**8)]

    assert all(later < earlier for earlier, later in zip(gaps, gaps[1:]))
    # root-N rate: two decades of N cut the gap tenfold
    assert gaps[-1] < 0.2 * gaps[-2]


def test_lipschitz_estimate() -> None:
    assert lipschitz_estimate([2.0, 2.0, 2.0]) == 0.0
    assert lipschitz_estimate([0.0, 1.0, 3.0]) == 2.0
    with pytest.raises(DomainError, match="two states"):
        lipschitz_estimate([1.0])


def test_theorem2_with_unit_tau_and_monotonicity() -> None:
    inputs = _random_inputs(4, tau=1.0)
    n, revarb = 1000, -1500.0

    assert theorem2_bound(inputs, n, revarb) == pytest.approx((capital_L(inputs, n, n) - revarb) / n)
    values = [theorem2_bound(inputs, n, revarb, tau=tau) for tau in (0.01, 0.1, 0.5, 1.0)]
    assert all(later < earlier for earlier, later in zip(values, values[1:]))


def test_theorem2_decreases_with_sample_size() -> None:
    inputs = _random_inputs(6)
    risk = 1.2

    small = theorem2_bound(inputs, 10**3, revarb_from_risk(risk, inputs.kl, 10**3))
    large = theorem2_bound(inputs, 10**6, revarb_from_risk(risk, inputs.kl, 10**6))

    assert large < small


def test_theorem2_agrees_with_revarb_from_parts() -> None:
    model, _ = small_model(num_states=6, num_hidden_layers=1, mode=SpectrumMode.VSS, seed=2)
    samples = generate_quasi_real(model, 20, seed=9)
    inputs = bound_inputs_from_model(model)

    with torch.no_grad():
        revarb = float(variational_bound(model, samples))
    from_parts = revarb_from_risk(float(per_sample_nll(model, samples).mean()), inputs.kl, 20)

    assert theorem2_bound(inputs, 20, revarb) == pytest.approx(theorem2_bound(inputs, 20, from_parts), rel=1e-10)


def test_gap_bound_of_empty_model_is_zero() -> None:
    inputs = _zero_inputs(tau=1.0)
    for n in (1, 10, 10**4, 10**7):
        assert theorem3_gap_bound(inputs, n) == 0.0


def test_gap_bound_accepts_half_tau_and_rejects_zero() -> None:
    inputs = _random_inputs(7, tau=0.5)
    assert math.isfinite(theorem3_gap_bound(inputs, 100))
    with pytest.raises(DomainError, match="tau"):
        theorem3_gap_bound(inputs, 100, tau=0.0)
    with pytest.raises(DomainError, match="positive integer"):
        theorem3_gap_bound(inputs, 0)


def _fitted_slope(values: list[float], sizes: np.ndarray) -> float:
    return float(np.polyfit(np.log(sizes), np.log(values), 1)[0])


def test_gap_bound_converges_at_root_n_rate() -> None:
    inputs = _random_inputs(8)
    sizes = np.unique(np.round(np.logspace(3, 5, 15)).astype(int))
    tail = theorem3_gap_bound(inputs, 10**6)

    gaps = [theorem3_gap_bound(inputs, int(n)) - tail for n in sizes]

    assert all(gap > 0 for gap in gaps)
    assert -0.65 <= _fitted_slope(gaps, sizes) <= -0.35


def test_gap_bound_is_eventually_nonincreasing() -> None:
    for seed in range(10):
        inputs = _random_inputs(seed)
        values = [theorem3_gap_bound(inputs, n) for n in (10**3, 10**4, 10**5, 10**6)]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(values, values[1:]))


def test_oracle_bound_of_deterministic_model_is_tail_term() -> None:
    inputs = _zero_inputs(tau=0.5)
    assert oracle_risk(inputs) == 0.0
    assert theorem5_oracle_bound(inputs, 100) == pytest.approx(theorem3_gap_bound(inputs, 100))


def test_oracle_bound_converges_to_oracle_risk() -> None:
    inputs = _random_inputs(9)
    sizes = np.unique(np.round(np.logspace(3, 5, 15)).astype(int))
    tail = theorem5_oracle_bound(inputs, 10**6)

    gaps = [theorem5_oracle_bound(inputs, int(n)) - tail for n in sizes]

    assert -0.65 <= _fitted_slope(gaps, sizes) <= -0.35
    assert oracle_risk(inputs) == pytest.approx(
        sum(layer.noise_free_var_sum / (2.0 * layer.sigma_noise**2) for layer in inputs.layers)
    )


@pytest.mark.slow
def test_trained_model_bounds_shrink_at_root_n_rate() -> None:
    dataset = synthetic_dataset(64)
    model = init_model(dataset, num_hidden_layers=1, num_features=16, horizon_x=1, horizon_h=1, seed=0)
    trained = train(model, dataset, TrainingConfig(iterations=300, refresh_every=10)).model
    inputs = bound_inputs_from_model(trained, tau=0.5)
    sizes = np.unique(np.round(np.logspace(3, 5, 15)).astype(int))

    gap_tail = theorem3_gap_bound(inputs, 10**6)
    gaps = [theorem3_gap_bound(inputs, int(n)) - gap_tail for n in sizes]
    excess_tail = theorem5_oracle_bound(inputs, 10**6) - oracle_risk(inputs)
    excesses = [theorem5_oracle_bound(inputs, int(n)) - oracle_risk(inputs) - excess_tail for n in sizes]

    assert -0.65 <= _fitted_slope(gaps, sizes) <= -0.35
    assert -0.65 <= _fitted_slope(excesses, sizes) <= -0.35


def test_covering_number_of_unit_ball() -> None:
    assert covering_number_bound(1.0, 1.0, 3) == 1.0
    assert covering_number_bound(0.5, 1.0, 2) == 4.0
    with pytest.raises(DomainError):
        covering_number_bound(0.0, 1.0, 2)


def test_covering_without_input_dimension_adds_log_ratio() -> None:
    inputs = _random_inputs(10)
    n = 400
    lam = math.sqrt(n)
    num_states = inputs.layers[0].num_states
    ratio = capital_L(inputs, lam, n) / min(capital_L(inputs.with_state(k), lam * num_states, n) for k in range(num_states))

    value = covering_extension(inputs, n, input_dim=0)

    assert value == pytest.approx(theorem3_gap_bound(inputs, n) + math.log(ratio) / lam, rel=1e-12)


def test_covering_doubling_input_dim_adds_log_term() -> None:
    inputs = _random_inputs(11)
    n, q = 900, 2
    lam = math.sqrt(n)

    single = covering_extension(inputs, n, input_dim=q)
    double = covering_extension(inputs, n, input_dim=2 * q)

    assert (double - single) * lam == pytest.approx(q * math.log(n * inputs.big_lipschitz), rel=1e-10)


def test_covering_default_uses_least_favourable_state() -> None:
    inputs = _random_inputs(12)
    per_state = [covering_extension(inputs, 100, state=k) for k in range(inputs.layers[0].num_states)]
    assert covering_extension(inputs, 100) == pytest.approx(max(per_state))


def test_covering_rejects_undefined_log_ratio() -> None:
    with pytest.raises(DomainError, match="log-ratio"):
        covering_extension(_zero_inputs(), 100)
    with pytest.raises(DomainError, match="epsilon"):
        covering_extension(_random_inputs(13), 100, epsilon_prime=2.0)


def test_two_sided_halves_tau() -> None:
    inputs = _random_inputs(14, tau=1.0)
    one = theorem3_gap_bound(inputs, 100, tau=0.5)
    both = two_sided(lambda tau: theorem3_gap_bound(inputs, 100, tau=tau), 1.0)

    assert both == pytest.approx(one)
    assert two_sided(lambda tau: theorem3_gap_bound(inputs, 100, tau=tau), 0.3) >= theorem3_gap_bound(inputs, 100, tau=0.3)
    with pytest.raises(DomainError):
        two_sided(lambda tau: tau, 0.0)


def test_intersection_lower_bound_by_enumeration() -> None:
    weights = np.array([0.05, 0.1, 0.15, 0.2, 0.1, 0.15, 0.05, 0.2])
    outcomes = list(itertools.product((0, 1), repeat=3))
    events = [{index for index, outcome in enumerate(outcomes) if outcome[i] == 1 or outcome[(i + 1) % 3] == 1} for i in range(3)]
    probabilities = [float(weights[list(event)].sum()) for event in events]
    joint = float(weights[list(set.intersection(*events))].sum())

    assert joint >= intersection_lower_bound(probabilities) - 1e-12
    assert intersection_lower_bound([0.95, 0.95]) == pytest.approx(0.9)
    with pytest.raises(DomainError):
        intersection_lower_bound([1.2])
    with pytest.raises(DomainError):
        intersection_lower_bound([])


def test_variance_inputs_of_deterministic_weights() -> None:
    model, _ = small_model(num_states=6, num_hidden_layers=0, num_features=3)
    layer = model.output_layer
    zeroed = model.with_layer(
        0,
        varparams=VariationalParams(
            weight_mean=torch.zeros(3, dtype=DTYPE), weight_cov=torch.zeros(3, 3, dtype=DTYPE)
        ),
    )

    (moments,) = variance_cov_inputs(zeroed)

    sigma = float(layer.hyper.sigma_noise)
    assert moments.sum_var == pytest.approx(6 * sigma**2)
    np.testing.assert_allclose(moments.cov, 0.0, atol=1e-14)


@pytest.mark.parametrize("mode", [SpectrumMode.SS, SpectrumMode.VSS])
def test_covariances_are_psd(mode: SpectrumMode) -> None:
    model, _ = small_model(num_states=8, num_hidden_layers=1, mode=mode, seed=5)
    for moments in variance_cov_inputs(model):
        np.testing.assert_allclose(moments.cov, moments.cov.T, atol=1e-12)
        assert float(np.linalg.eigvalsh(moments.cov).min()) >= -1e-8
        assert np.all(moments.state_vars >= np.diag(moments.cov) - 1e-12)


@pytest.mark.slow
def test_variance_sum_agrees_with_sampled_outputs() -> None:
    model, _ = small_model(num_states=8, num_hidden_layers=1, num_features=4, seed=6)
    layer = model.output_layer
    inputs = build_inputs(model, 1)
    generator = torch.Generator().manual_seed(21)
    draws = 40_000

    with torch.no_grad():
        x = inputs.means + torch.sqrt(inputs.variances) * torch.randn(draws, 8, inputs.input_dim, generator=generator, dtype=DTYPE)
        chol = torch.linalg.cholesky(layer.varparams.weight_cov)
        w = layer.varparams.weight_mean + torch.randn(draws, 4, generator=generator, dtype=DTYPE) @ chol.T
        phi = feature_matrix(x.reshape(-1, inputs.input_dim), layer.points, layer.hyper).reshape(draws, 8, 4)
        noise = layer.hyper.sigma_noise * torch.randn(draws, 8, generator=generator, dtype=DTYPE)
        h = (phi * w[:, None, :]).sum(dim=-1) + noise
    centred = (h - h.mean(dim=0)).numpy()
    squared = centred**2
    estimate = float(squared.mean(axis=0).sum())
    se = float((squared.std(axis=0) / math.sqrt(draws)).sum())

    moments = variance_cov_inputs(model)[-1]

    assert abs(moments.sum_var - estimate) <= 4.0 * se


def test_bound_inputs_from_model_defaults() -> None:
    model, _ = small_model(num_states=6, num_hidden_layers=1, horizon_x=2, horizon_h=1)

    inputs = bound_inputs_from_model(model, tau=0.25)

    assert inputs.tau == 0.25
    assert [layer.delta for layer in inputs.layers] == [3.0, 1.0]
    assert inputs.big_lipschitz == pytest.approx(math.prod(layer.lipschitz for layer in inputs.layers))
    assert inputs.input_dim == 3
    assert inputs.kl > 0


def test_evaluate_variant_breakdown_matches_capital_L() -> None:
    inputs = _random_inputs(15)
    breakdown = evaluate_variant(BoundVariant.THEOREM3, inputs, 2500, lambda_rule=LambdaRule.SQRT_N)

    assert breakdown.value == pytest.approx(theorem3_gap_bound(inputs, 2500))
    assert breakdown.term1 + breakdown.term2 + breakdown.term3 == pytest.approx(capital_L(inputs, 50.0, 2500))
    assert len(breakdown.layer_terms) == 2
    assert breakdown.kl == inputs.kl


def test_evaluate_variant_empirical_bound_uses_lambda_n() -> None:
    inputs = _random_inputs(16)
    breakdown = evaluate_variant(BoundVariant.THEOREM2, inputs, 100, lambda_rule=LambdaRule.SQRT_N, empirical_risk=0.8)

    expected = theorem2_bound(inputs, 100, revarb_from_risk(0.8, inputs.kl, 100))
    assert breakdown.value == pytest.approx(expected)
    assert breakdown.term1 + breakdown.term2 + breakdown.term3 == pytest.approx(capital_L(inputs, 100.0, 100))
    with pytest.raises(DomainError, match="empirical risk"):
        evaluate_variant(BoundVariant.THEOREM2, inputs, 100)


def test_lambda_rule_values() -> None:
    assert LambdaRule.N.value_at(400) == 400.0
    assert LambdaRule.SQRT_N.value_at(400) == 20.0
    assert LambdaRule("sqrtN") is LambdaRule.SQRT_N


def test_bound_curve_requires_increasing_finite_points() -> None:
    with pytest.raises(DomainError, match="increasing"):
        BoundCurve(lambda_rule=LambdaRule.N, points=((10, 1.0), (10, 0.5)))
    with pytest.raises(DomainError, match="finite"):
        BoundCurve(lambda_rule=LambdaRule.N, points=((10, math.inf),))
    curve = BoundCurve(lambda_rule="sqrtN", points=[(1, 2.0), (5, 1.0)])
    assert curve.lambda_rule is LambdaRule.SQRT_N


def test_layer_inputs_validation() -> None:
    with pytest.raises(DomainError, match="semidefinite"):
        LayerBoundInputs(state_vars=[1.0, 1.0], cov=[[1.0, 2.0], [2.0, 1.0]], sigma_noise=1.0, lipschitz=0.0, delta=1.0)
    with pytest.raises(DomainError, match="sigma_noise"):
        LayerBoundInputs(state_vars=[1.0], cov=[[0.0]], sigma_noise=0.0, lipschitz=0.0, delta=1.0)
    with pytest.raises(DomainError, match="kl"):
        BoundInputs(layers=(LayerBoundInputs(state_vars=[1.0], cov=[[0.0]], sigma_noise=1.0, lipschitz=0.0, delta=1.0),), kl=-1.0)
