import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from factories import small_model, synthetic_dataset
from pacdrgp.domain.errors import DatasetValidationError, DomainError, ShapeError
from pacdrgp.domain.psi_statistics import PsiStats
from pacdrgp.domain.revarb_model import (
    SpectrumMode,
    build_inputs,
    denormalize,
    expected_nll,
    generate_quasi_real,
    kl_q_p,
    layer_input_dim,
    layer_statistics,
    normalize_dataset,
    optimal_weight_posterior,
    parse_mode,
    per_sample_nll,
    predictive_moments,
    predictive_posterior,
    refresh_weights,
    sample_from_moments,
    variational_bound,
)
from pacdrgp.domain.spectral_features import frequencies
from pacdrgp.domain.tensors import DTYPE, to_numpy


def _at_prior(model):
    for index, layer in enumerate(model.layers):
        m = layer.hyper.num_features
        varparams = replace(
            layer.varparams,
            weight_mean=torch.zeros(m, dtype=DTYPE),
            weight_cov=torch.eye(m, dtype=DTYPE),
        )
        if model.mode is SpectrumMode.VSS:
            varparams = replace(
                varparams,
                spectral_means=torch.zeros_like(varparams.spectral_means),
                spectral_vars=torch.ones_like(varparams.spectral_vars),
            )
        if varparams.latent_means is not None:
            varparams = replace(
                varparams,
                latent_means=torch.zeros_like(varparams.latent_means),
                latent_vars=torch.ones_like(varparams.latent_vars),
            )
        model = model.with_layer(index, varparams=varparams)
    return model


def test_parse_mode_accepts_either_case() -> None:
    assert parse_mode("vss") is SpectrumMode.VSS
    assert parse_mode(" SS ") is SpectrumMode.SS
    with pytest.raises(DomainError, match="Unknown spectrum mode"):
        parse_mode("RFF")


def test_layer_input_dims_follow_recurrent_structure() -> None:
    assert layer_input_dim(0, 0, 2, 3, 2) == 4
    assert layer_input_dim(0, 2, 2, 3, 2) == 7
    assert layer_input_dim(1, 2, 2, 3, 2) == 6
    assert layer_input_dim(2, 2, 2, 3, 2) == 3


def test_first_state_lags_are_deterministic_zeros() -> None:
    model, _ = small_model(num_states=6, num_hidden_layers=2, horizon_x=2, horizon_h=2)

    first = build_inputs(model, 0)
    middle = build_inputs(model, 1)

    assert first.means.shape == (6, 2 + 2)
    torch.testing.assert_close(first.means[0], torch.zeros(4, dtype=DTYPE))
    torch.testing.assert_close(first.variances[0], torch.zeros(4, dtype=DTYPE))
    # own lags 1..H_h are shifted copies of the latent sequence
    latent = model.layers[0].varparams.latent_means
    torch.testing.assert_close(first.means[1:, 0], latent[:-1])
    torch.testing.assert_close(first.means[2:, 1], latent[:-2])
    # the layer below enters at lags 0..H_h-1
    torch.testing.assert_close(middle.means[:, 2], latent)
    torch.testing.assert_close(middle.variances[:, 2], model.layers[0].varparams.latent_vars)


def test_build_inputs_rejects_missing_layer() -> None:
    model, _ = small_model()
    with pytest.raises(DomainError, match="out of range"):
        build_inputs(model, 2)


def test_kl_vanishes_at_the_prior() -> None:
    for mode in SpectrumMode:
        model, _ = small_model(num_hidden_layers=1, mode=mode)
        prior = _at_prior(model)

        assert abs(float(kl_q_p(prior))) < 1e-12
        assert float(kl_q_p(model)) > 0


def test_bound_equals_summed_nll_plus_kl() -> None:
    model, dataset = small_model(num_states=8, num_hidden_layers=1, mode=SpectrumMode.VSS)
    samples = generate_quasi_real(model, 3, seed=4)

    with torch.no_grad():
        bound = float(variational_bound(model, samples))
        per_column = sum(float(expected_nll(model, samples[:, n])) for n in range(3))
        kl = float(kl_q_p(model))

    assert bound == pytest.approx(-(per_column + kl), rel=1e-10)


def test_per_sample_nll_matches_expected_nll() -> None:
    model, _ = small_model(num_states=6, num_hidden_layers=1)
    samples = generate_quasi_real(model, 4, seed=2)

    batched = per_sample_nll(model, samples)

    with torch.no_grad():
        direct = [float(expected_nll(model, samples[:, n])) for n in range(4)]
    np.testing.assert_allclose(batched, direct, rtol=1e-10)


def test_expected_nll_requires_single_vector() -> None:
    model, dataset = small_model(num_states=5)
    with pytest.raises(ShapeError, match="single"):
        expected_nll(model, np.zeros((5, 2)))
    with pytest.raises(ShapeError, match="rows"):
        expected_nll(model, np.zeros(4))


def test_closed_form_weights_maximise_the_bound() -> None:
    model, dataset = small_model(num_states=10, num_hidden_layers=0, num_features=5)
    observations = dataset.outputs

    with torch.no_grad():
        optimum = refresh_weights(model, observations)
        best = float(variational_bound(optimum, observations))
        layer = optimum.output_layer
        generator = torch.Generator().manual_seed(0)
        for _ in range(5):
            nudge = 0.05 * torch.randn(5, generator=generator, dtype=DTYPE)
            moved = optimum.with_layer(0, varparams=replace(layer.varparams, weight_mean=layer.varparams.weight_mean + nudge))
            assert float(variational_bound(moved, observations)) < best
        scaled = optimum.with_layer(0, varparams=replace(layer.varparams, weight_cov=1.2 * layer.varparams.weight_cov))
        assert float(variational_bound(scaled, observations)) < best


def test_closed_form_weights_have_zero_gradient() -> None:
    model, dataset = small_model(num_states=8, num_hidden_layers=0, num_features=4)
    observations = dataset.outputs
    with torch.no_grad():
        optimum = refresh_weights(model, observations)
    layer = optimum.output_layer
    weight_mean = layer.varparams.weight_mean.clone().requires_grad_(True)
    moved = optimum.with_layer(0, varparams=replace(layer.varparams, weight_mean=weight_mean))

    (gradient,) = torch.autograd.grad(variational_bound(moved, observations), [weight_mean])

    assert float(gradient.abs().max()) < 1e-8


def test_optimal_posterior_covariance_is_scaled_inverse() -> None:
    model, dataset = small_model(num_states=6, num_hidden_layers=0, num_features=3)
    with torch.no_grad():
        _, weight_cov = optimal_weight_posterior(model, 0, dataset.outputs)
    assert torch.allclose(weight_cov, weight_cov.T)
    assert float(torch.linalg.eigvalsh(weight_cov).min()) > 0


def test_predictive_posterior_validates_indices() -> None:
    model, _ = small_model(num_states=5)
    mean, variance = predictive_posterior(model, 1, 2)
    assert np.isfinite(mean)
    assert variance > float(model.output_layer.hyper.sigma_noise) ** 2 - 1e-12
    with pytest.raises(DomainError, match="state"):
        predictive_posterior(model, 1, 5)
    with pytest.raises(DomainError, match="layer"):
        predictive_posterior(model, 3, 0)


def test_quasi_real_draws_are_seeded() -> None:
    model, _ = small_model(num_states=5)

    first = generate_quasi_real(model, 7, seed=3)
    second = generate_quasi_real(model, 7, seed=3)

    assert first.shape == (5, 7)
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, generate_quasi_real(model, 7, seed=4))


def test_sample_from_moments_rejects_bad_arguments() -> None:
    with pytest.raises(DomainError):
        sample_from_moments([0.0], [1.0], 0, seed=0)
    with pytest.raises(DomainError, match="non-negative"):
        sample_from_moments([0.0], [-1.0], 2, seed=0)


def test_normalization_round_trip() -> None:
    raw_inputs = np.array([[1.0], [3.0], [5.0]])
    raw_outputs = np.array([2.0, 2.0, 2.0])

    dataset = normalize_dataset([0, 1, 2], raw_inputs, raw_outputs)
    inputs, outputs = denormalize(dataset)

    np.testing.assert_allclose(dataset.exogenous.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(dataset.exogenous.std(axis=0), 1.0)
    # constant channel keeps unit scale
    np.testing.assert_allclose(dataset.outputs, 0.0)
    np.testing.assert_allclose(inputs, raw_inputs)
    np.testing.assert_allclose(outputs.reshape(-1), raw_outputs)


def test_dataset_rejects_non_finite_values() -> None:
    with pytest.raises(DatasetValidationError, match="outputs"):
        normalize_dataset([0, 1], [[0.0], [1.0]], [0.0, np.nan])


def test_model_without_hidden_layers_is_supported() -> None:
    model, dataset = small_model(num_states=6, num_hidden_layers=0)

    assert model.num_hidden_layers == 0
    assert build_inputs(model, 0).input_dim == dataset.exo_dim
    assert np.isfinite(float(variational_bound(model, dataset.outputs)))


def test_synthetic_dataset_is_normalized() -> None:
    dataset = synthetic_dataset(32)
    assert dataset.num_states == 32
    assert abs(float(dataset.outputs.mean())) < 1e-12


def test_scalar_weight_kl_is_one_half() -> None:
    model, _ = small_model(num_hidden_layers=0, num_features=1)
    layer = model.output_layer
    unit = model.with_layer(0, varparams=replace(layer.varparams, weight_mean=[1.0], weight_cov=[[1.0]]))

    assert float(kl_q_p(unit)) == 0.5
    wider = unit.with_layer(0, varparams=replace(unit.output_layer.varparams, weight_cov=[[1.5]]))
    assert float(kl_q_p(wider)) > 0.5


def _joint_monte_carlo_nll(model, observations: np.ndarray, num_samples: int, seed: int) -> tuple[float, float]:
    """Mean and standard error of the log loss under draws of latents and weights from q."""
    rng = np.random.default_rng(seed)
    hidden, output = model.layers
    num_states = model.num_states
    mu = to_numpy(hidden.varparams.latent_means)
    lam = to_numpy(hidden.varparams.latent_vars)
    h = mu + np.sqrt(lam) * rng.standard_normal((num_samples, num_states))
    previous_h = np.concatenate([np.zeros((num_samples, 1)), h[:, :-1]], axis=1)
    design = to_numpy(model.design)[:, 0]
    previous_x = np.broadcast_to(np.concatenate([[0.0], design[:-1]]), (num_samples, num_states))
    hidden_inputs = np.stack([previous_h, previous_x], axis=-1)
    output_inputs = h[..., None]
    total = np.zeros(num_samples)
    for layer, inputs, targets in ((hidden, hidden_inputs, h), (output, output_inputs, observations[None, :])):
        hyper = layer.hyper
        omega = to_numpy(frequencies(layer.points.Z, hyper))
        argument = ((inputs[:, :, None, :] - to_numpy(hyper.shifts)) * omega).sum(axis=-1) + to_numpy(hyper.phases)
        features = float(hyper.amplitude) * np.cos(argument)
        weights = rng.multivariate_normal(
            to_numpy(layer.varparams.weight_mean), to_numpy(layer.varparams.weight_cov), size=num_samples
        )
        fitted = np.einsum("skm,sm->sk", features, weights)
        noise_var = float(hyper.sigma_noise) ** 2
        total += (0.5 * math.log(2.0 * math.pi * noise_var) + (targets - fitted) ** 2 / (2.0 * noise_var)).sum(axis=1)
    return float(total.mean()), float(total.std(ddof=1) / math.sqrt(num_samples))


def test_expected_nll_matches_joint_monte_carlo() -> None:
    model, dataset = small_model(num_states=4, num_hidden_layers=1, num_features=2)
    observations = dataset.outputs.reshape(-1)

    with torch.no_grad():
        analytic = float(expected_nll(model, observations))
    estimate, se = _joint_monte_carlo_nll(model, observations, 200_000, seed=11)

    assert abs(analytic - estimate) <= 5.0 * se


def test_expected_nll_sums_per_state_terms() -> None:
    model, dataset = small_model(num_states=4, num_hidden_layers=1, num_features=2, mode=SpectrumMode.VSS)
    observations = dataset.outputs.reshape(-1)

    with torch.no_grad():
        analytic = float(expected_nll(model, observations))
        total = 0.0
        for index, layer in enumerate(model.layers):
            stats = layer_statistics(model, index)
            m, s = layer.varparams.weight_mean, layer.varparams.weight_cov
            noise_var = float(layer.hyper.sigma_noise) ** 2
            for k in range(model.num_states):
                first, second = stats.row(k)
                fitted = float(first @ m)
                spread = float(m @ second @ m) - fitted**2 + float(torch.trace(second @ s))
                if index == model.num_hidden_layers:
                    fit = (observations[k] - fitted) ** 2
                else:
                    mu_k = float(layer.varparams.latent_means[k])
                    fit = (mu_k - fitted) ** 2 + float(layer.varparams.latent_vars[k])
                total += 0.5 * math.log(2.0 * math.pi * noise_var) + (fit + spread) / (2.0 * noise_var)

    assert analytic == pytest.approx(total, rel=1e-10)


def test_predictive_posterior_matches_sampled_output() -> None:
    model, _ = small_model(num_states=5, num_hidden_layers=1, num_features=3)
    state, num_samples = 2, 400_000
    mean, variance = predictive_posterior(model, 1, state)

    rng = np.random.default_rng(5)
    hidden, output = model.layers
    latent_mean = float(hidden.varparams.latent_means[state])
    latent_sd = math.sqrt(float(hidden.varparams.latent_vars[state]))
    h = latent_mean + latent_sd * rng.standard_normal(num_samples)
    hyper = output.hyper
    omega = to_numpy(frequencies(output.points.Z, hyper))[:, 0]
    argument = (h[:, None] - to_numpy(hyper.shifts)[:, 0]) * omega + to_numpy(hyper.phases)
    features = float(hyper.amplitude) * np.cos(argument)
    weights = rng.multivariate_normal(
        to_numpy(output.varparams.weight_mean), to_numpy(output.varparams.weight_cov), size=num_samples
    )
    y = (features * weights).sum(axis=1) + float(hyper.sigma_noise) * rng.standard_normal(num_samples)

    mean_se = y.std(ddof=1) / math.sqrt(num_samples)
    squared = (y - y.mean()) ** 2
    variance_se = squared.std(ddof=1) / math.sqrt(num_samples)
    assert abs(y.mean() - mean) <= 5.0 * mean_se
    assert abs(y.var(ddof=1) - variance) <= 5.0 * variance_se


def test_predictive_posterior_agrees_with_batched_moments() -> None:
    model, _ = small_model(num_states=6, num_hidden_layers=1, mode=SpectrumMode.VSS)
    with torch.no_grad():
        means, variances = predictive_moments(model, 0)

    for state in range(6):
        mean, variance = predictive_posterior(model, 0, state)
        assert mean == pytest.approx(float(means[state]), rel=1e-10, abs=1e-12)
        assert variance == pytest.approx(float(variances[state]), rel=1e-10)


def test_zero_variance_draws_repeat_the_means() -> None:
    means = np.array([0.3, -1.2, 2.0])

    samples = sample_from_moments(means, np.zeros(3), 6, seed=9)

    np.testing.assert_array_equal(samples, np.repeat(means[:, None], 6, axis=1))


def test_quasi_real_sample_moments_follow_the_predictive() -> None:
    model, _ = small_model(num_states=5, num_hidden_layers=1)
    num_samples = 50_000
    with torch.no_grad():
        mean, variance = predictive_moments(model, 1)
    mean, variance = to_numpy(mean), to_numpy(variance)

    samples = generate_quasi_real(model, num_samples, seed=21)

    assert np.all(np.abs(samples.mean(axis=1) - mean) <= 4.0 * np.sqrt(variance / num_samples))
    np.testing.assert_allclose(samples.var(axis=1, ddof=1), variance, rtol=0.035)


def test_optimal_weights_without_first_moment() -> None:
    model, dataset = small_model(num_states=6, num_hidden_layers=0, num_features=3)
    generator = torch.Generator().manual_seed(8)
    factor = torch.randn(3, 3, generator=generator, dtype=DTYPE)
    second = factor @ factor.T + 0.1 * torch.eye(3, dtype=DTYPE)
    stats = PsiStats(
        psi1=torch.zeros(6, 3, dtype=DTYPE),
        psi2=second,
        psi2_rows=second.expand(6, 3, 3) / 6.0,
    )
    noise_var = float(model.output_layer.hyper.sigma_noise) ** 2

    weight_mean, weight_cov = optimal_weight_posterior(model, 0, dataset.outputs, stats=stats)

    np.testing.assert_array_equal(weight_mean.numpy(), np.zeros(3))
    expected = noise_var * np.linalg.inv(second.numpy() + noise_var * np.eye(3))
    np.testing.assert_allclose(weight_cov.numpy(), expected, rtol=1e-10, atol=1e-14)


def test_optimal_weights_fall_back_to_prior_under_huge_noise() -> None:
    model, dataset = small_model(num_states=6, num_hidden_layers=0, num_features=3)
    layer = model.output_layer
    noisy = model.with_layer(0, hyper=replace(layer.hyper, sigma_noise=1e6))

    with torch.no_grad():
        weight_mean, weight_cov = optimal_weight_posterior(noisy, 0, dataset.outputs)

    np.testing.assert_allclose(weight_mean.numpy(), np.zeros(3), atol=1e-9)
    np.testing.assert_allclose(weight_cov.numpy(), np.eye(3), atol=1e-9)
