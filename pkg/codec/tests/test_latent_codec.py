import pytest
import torch
from scipy.stats import norm
from torch.autograd import gradcheck
from torch.func import functional_call

from app.core.config import CompressorConfig
from app.core.exceptions import ConfigError, ShapeMismatchError
from app.models.latent_codec import (
    LIKELIHOOD_FLOOR,
    SIGMA_MIN,
    DetailEncoder,
    EntropyParams,
    FactorizedDensity,
    HyperDecoder,
    LatentCompressor,
    ShapeEncoder,
    estimate_rate,
    gaussian_conditional_likelihood,
    quantize,
)
from app.services.cdf import symbol_grid

from tests.conftest import TOY_C, TOY_S


def toy_compressor(**overrides) -> LatentCompressor:
    torch.manual_seed(0)
    config = dict(C=TOY_C, C_z=4, S=TOY_S, k_enc=4)
    config.update(overrides)
    return LatentCompressor(CompressorConfig(**config))


class TestQuantize:
    def test_rounds_half_away_from_zero(self):
        y = torch.tensor([1.4, -1.5, 2.5, 0.5, -0.4, -2.6])
        assert quantize(y, "test").tolist() == [1.0, -2.0, 3.0, 1.0, 0.0, -3.0]

    def test_training_noise_is_uniform(self, generator):
        y = torch.zeros(100000, dtype=torch.float64)
        noise = quantize(y, "train", generator)
        assert float(noise.min()) >= -0.5
        assert float(noise.max()) < 0.5
        assert float(noise.mean()) == pytest.approx(0.0, abs=0.005)
        assert float(noise.var()) == pytest.approx(1 / 12, rel=0.02)

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            quantize(torch.zeros(2), "eval")


class TestGaussianConditional:
    def test_standard_normal_at_zero(self):
        params = EntropyParams(
            mu=torch.zeros(1, dtype=torch.float64), sigma=torch.ones(1, dtype=torch.float64)
        )
        p = gaussian_conditional_likelihood(torch.zeros(1, dtype=torch.float64), params)
        expected = norm.cdf(0.5) - norm.cdf(-0.5)
        assert float(p) == pytest.approx(expected, abs=1e-9)
        assert float(p) == pytest.approx(0.3829, abs=1e-4)

    def test_unfloored_mass_sums_to_one(self, generator):
        grid = symbol_grid().unsqueeze(0)
        mu = (torch.rand(50, 1, generator=generator, dtype=torch.float64) - 0.5) * 20
        sigma = SIGMA_MIN + torch.rand(50, 1, generator=generator, dtype=torch.float64) * 20
        pmf = gaussian_conditional_likelihood(grid, EntropyParams(mu=mu, sigma=sigma), floor=0.0)
        assert torch.allclose(pmf.sum(dim=-1), torch.ones(50, dtype=torch.float64), atol=1e-6)

    def test_peak_at_nearest_integer(self):
        grid = symbol_grid()
        for mu in (-3.3, 0.2, 4.7):
            params = EntropyParams(
                mu=torch.tensor(mu, dtype=torch.float64),
                sigma=torch.tensor(1.5, dtype=torch.float64),
            )
            pmf = gaussian_conditional_likelihood(grid, params)
            assert int(grid[int(torch.argmax(pmf))]) == round(mu)

    def test_floor_applies(self):
        params = EntropyParams(mu=torch.zeros(1), sigma=torch.full((1,), 0.1))
        p = gaussian_conditional_likelihood(torch.full((1,), 40.0), params)
        assert float(p) == pytest.approx(LIKELIHOOD_FLOOR)

    def test_gradient_matches_finite_differences(self, generator):
        y_hat = torch.tensor([-1.0, 0.0, 2.0, 3.0], dtype=torch.float64)
        mu = torch.randn(4, generator=generator, dtype=torch.float64).requires_grad_()
        sigma = (0.5 + torch.rand(4, generator=generator, dtype=torch.float64)).requires_grad_()
        def likelihood(m, s):
            return gaussian_conditional_likelihood(y_hat, EntropyParams(mu=m, sigma=s), floor=0.0)

        assert gradcheck(likelihood, (mu, sigma))


class TestFactorizedDensity:
    def test_mass_near_one_at_initialization(self):
        torch.manual_seed(0)
        density = FactorizedDensity(6).double()
        values = torch.arange(-30, 31, dtype=torch.float64).unsqueeze(-1).expand(-1, 6)
        p = density.likelihood(values, floor=0.0)
        mass = p.sum(dim=0)
        assert bool(((mass > 0.99) & (mass <= 1.0 + 1e-9)).all())

    def test_floored_probabilities_in_range(self, generator):
        density = FactorizedDensity(4)
        p = density.likelihood(torch.randn(10, 4, generator=generator) * 50)
        assert bool(((p >= LIKELIHOOD_FLOOR) & (p <= 1.0)).all())

    def test_cdf_is_monotone(self):
        density = FactorizedDensity(3)
        values = torch.linspace(-20, 20, 200).unsqueeze(-1).expand(-1, 3)
        cdf = density.cdf(values)
        assert bool((cdf[1:] >= cdf[:-1]).all())

    def test_pmf_grid_shape(self):
        density = FactorizedDensity(5).double()
        assert density.pmf_grid(symbol_grid()).shape == (5, 511)

    def test_width_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            FactorizedDensity(4).likelihood(torch.zeros(2, 5))

    def test_parameter_gradients(self):
        torch.manual_seed(0)
        density = FactorizedDensity(2).double()
        names = [name for name, _ in density.named_parameters()]
        params = tuple(p.detach().clone().requires_grad_() for p in density.parameters())
        values = torch.tensor([[-1.0, 0.0], [1.0, 2.0]], dtype=torch.float64)

        def rate(*flat):
            likelihood = functional_call(density, dict(zip(names, flat)), (values,), {"floor": 0.0})
            return -torch.log2(likelihood).sum()

        assert gradcheck(rate, params)


class TestEncoders:
    def test_shape_encoder_is_permutation_invariant(self, generator):
        torch.manual_seed(0)
        encoder = ShapeEncoder(TOY_C)
        x = torch.rand(1, 40, 3, generator=generator)
        reference = encoder(x)
        for _ in range(20):
            perm = torch.randperm(40, generator=generator)
            assert torch.allclose(encoder(x[:, perm]), reference, atol=1e-6)

    def test_detail_encoder_shape(self, generator):
        encoder = DetailEncoder(TOY_C, tokens=TOY_S, neighbors=4)
        assert encoder(torch.rand(2, 20, 3, generator=generator)).shape == (2, TOY_S, TOY_C)

    def test_identical_patches_give_identical_rows(self):
        encoder = DetailEncoder(TOY_C, tokens=TOY_S, neighbors=3)
        y_h = encoder(torch.zeros(1, 10, 3))
        assert torch.equal(y_h[0], y_h[0, :1].expand(TOY_S, -1))

    def test_hyper_decoder_shapes_and_floor(self, generator):
        decoder = HyperDecoder(4, TOY_C, TOY_S)
        params = decoder(torch.randn(3, 4, generator=generator) * 10)
        assert params.mu.shape == (3, TOY_S, TOY_C)
        assert params.sigma.shape == (3, TOY_S, TOY_C)
        assert float(params.sigma.min()) >= SIGMA_MIN

    def test_hyper_decoder_width_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            HyperDecoder(4, TOY_C, TOY_S)(torch.zeros(1, 5))

    def test_hyper_decoder_gradients(self, generator):
        torch.manual_seed(0)
        decoder = HyperDecoder(2, 4, 2).double()
        z = torch.randn(3, 2, generator=generator, dtype=torch.float64).requires_grad_()

        def decode(z_hat):
            params = decoder(z_hat)
            return params.mu, params.sigma

        assert gradcheck(decode, (z,))


class TestEstimateRate:
    def test_half_probability_is_one_bit(self):
        rate = estimate_rate({"y_l": torch.full((2, 12), 0.5), "z": torch.full((2, 4), 0.5)})
        assert rate.tolist() == [16.0, 16.0]

    def test_certain_symbols_are_free(self):
        assert estimate_rate({"y_h": torch.ones(1, 4, 12)}).tolist() == [0.0]

    def test_matches_sum_of_logs(self, generator):
        p = torch.rand(3, 7, generator=generator, dtype=torch.float64) * 0.9 + 0.05
        expected = (-torch.log2(p)).sum(dim=-1)
        assert torch.allclose(estimate_rate({"z": p}), expected)

    def test_no_streams(self):
        with pytest.raises(ShapeMismatchError):
            estimate_rate({})


class TestLatentCompressor:
    def test_full_model_outputs(self, generator):
        compressor = toy_compressor()
        out = compressor(torch.rand(2, 20, 3, generator=generator), mode="test")
        latents = out.latents
        assert latents.y_l_hat.shape == (2, TOY_C)
        assert latents.y_h_hat.shape == (2, TOY_S, TOY_C)
        assert latents.z_hat.shape == (2, 4)
        assert torch.equal(latents.z_hat, latents.z_hat.round())
        assert set(out.likelihoods) == {"y_l", "z", "y_h"}
        assert torch.allclose(compressor.estimate_rate(latents), estimate_rate(out.likelihoods))

    def test_shape_only(self, generator):
        compressor = toy_compressor(use_detail_latent=False)
        out = compressor(torch.rand(1, 20, 3, generator=generator), mode="test")
        assert out.latents.y_h_hat is None and out.latents.z_hat is None
        assert set(out.likelihoods) == {"y_l"}
        assert out.entropy_params is None

    def test_detail_only(self, generator):
        compressor = toy_compressor(use_shape_latent=False)
        out = compressor(torch.rand(1, 20, 3, generator=generator), mode="test")
        assert out.latents.y_l_hat is None
        assert set(out.likelihoods) == {"z", "y_h"}
        assert compressor.shape_encoder is None

    def test_training_mode_is_seeded(self):
        compressor = toy_compressor()
        x = torch.rand(1, 20, 3, generator=torch.Generator().manual_seed(1))
        a = compressor(x, generator=torch.Generator().manual_seed(5)).latents
        b = compressor(x, generator=torch.Generator().manual_seed(5)).latents
        assert torch.equal(a.y_h_hat, b.y_h_hat)
        assert not torch.equal(a.y_h_hat, a.y_h_hat.round())
