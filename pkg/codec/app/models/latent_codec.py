"""Dual-space compressor: shape and detail encoders, hyperprior and entropy models.

The factorized density and the Gaussian conditional follow the
entropy-bottleneck / scale-hyperprior construction: per-channel monotone
cumulatives for side-information-free latents, and a discretized Gaussian
whose mean and scale come from a decoded hyper latent.
"""
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from app.core.config import CompressorConfig
from app.core.exceptions import ConfigError, ShapeMismatchError
from app.models.generator import LocalGroupEmbedding, PointNetStem
from app.services.geometry import farthest_point_sample, index_points, knn

LIKELIHOOD_FLOOR = 2.0**-16
SIGMA_MIN = 0.04
STREAMS = ("y_l", "z", "y_h")


class LowerBoundFunction(torch.autograd.Function):
    """max(x, bound) that still lets gradients push values up from below."""

    @staticmethod
    def forward(ctx, x: Tensor, bound: Tensor) -> Tensor:
        ctx.save_for_backward(x, bound)
        return torch.max(x, bound)

    @staticmethod
    def backward(ctx, grad_output: Tensor):
        x, bound = ctx.saved_tensors
        pass_through = (x >= bound) | (grad_output < 0)
        return pass_through.type(grad_output.dtype) * grad_output, None


def lower_bound(x: Tensor, bound: float) -> Tensor:
    return LowerBoundFunction.apply(x, torch.tensor(bound, dtype=x.dtype, device=x.device))


def quantize(y: Tensor, mode: str, generator: Optional[torch.Generator] = None) -> Tensor:
    """Uniform-noise proxy in training, round-half-away-from-zero at test time."""
    if mode == "train":
        noise = torch.rand(y.shape, generator=generator, dtype=y.dtype).to(y.device) - 0.5
        return y + noise
    if mode == "test":
        return torch.sign(y) * torch.floor(y.abs() + 0.5)
    raise ConfigError(f"Unknown quantization mode '{mode}'", details={"mode": mode})


def standardized_cumulative(x: Tensor) -> Tensor:
    # erfc keeps precision in the lower tail
    return 0.5 * torch.erfc(-(2.0**-0.5) * x)


@dataclass(frozen=True)
class EntropyParams:
    mu: Tensor
    sigma: Tensor


def gaussian_conditional_likelihood(
    y_hat: Tensor, params: EntropyParams, floor: float = LIKELIHOOD_FLOOR
) -> Tensor:
    """P(y_hat) under N(mu, sigma^2) convolved with U(-1/2, 1/2)."""
    values = (y_hat - params.mu).abs()
    sigma = lower_bound(params.sigma, SIGMA_MIN)
    upper = standardized_cumulative((0.5 - values) / sigma)
    lower = standardized_cumulative((-0.5 - values) / sigma)
    likelihood = upper - lower
    return lower_bound(likelihood, floor) if floor > 0 else likelihood


class FactorizedDensity(nn.Module):
    """Per-channel learned cumulative built from composed monotone layers."""

    def __init__(
        self, channels: int, filters: Sequence[int] = (3, 3), init_scale: float = 4.0
    ) -> None:
        super().__init__()
        self.channels = int(channels)
        self.filters = tuple(int(f) for f in filters)

        widths = (1,) + self.filters + (1,)
        scale = init_scale ** (1 / (len(self.filters) + 1))

        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(self.filters) + 1):
            init = float(np.log(np.expm1(1 / scale / widths[i + 1])))
            matrix = torch.full((channels, widths[i + 1], widths[i]), init)
            self.matrices.append(nn.Parameter(matrix))
            bias = torch.empty(channels, widths[i + 1], 1)
            nn.init.uniform_(bias, -0.5, 0.5)
            self.biases.append(nn.Parameter(bias))
            if i < len(self.filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, widths[i + 1], 1)))

    def _logits_cumulative(self, inputs: Tensor) -> Tensor:
        # inputs: (channels, 1, M)
        logits = inputs
        for i in range(len(self.filters) + 1):
            # softplus keeps every weight nonnegative, hence a monotone map
            logits = torch.matmul(F.softplus(self.matrices[i]), logits) + self.biases[i]
            if i < len(self.filters):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def _channel_first(self, values: Tensor) -> Tensor:
        if values.shape[-1] != self.channels:
            raise ShapeMismatchError(
                "Latent width does not match the density",
                details={"expected": self.channels, "got": values.shape[-1]},
            )
        return values.reshape(-1, self.channels).t().unsqueeze(1)

    def cdf(self, values: Tensor) -> Tensor:
        logits = self._logits_cumulative(self._channel_first(values))
        return torch.sigmoid(logits).squeeze(1).t().reshape(values.shape)

    def likelihood(self, values: Tensor, floor: float = LIKELIHOOD_FLOOR) -> Tensor:
        x = self._channel_first(values)
        lower = self._logits_cumulative(x - 0.5)
        upper = self._logits_cumulative(x + 0.5)
        # evaluate on the side of the median where sigmoid is most precise
        sign = -torch.sign(lower + upper).detach()
        likelihood = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        likelihood = likelihood.squeeze(1).t().reshape(values.shape)
        return lower_bound(likelihood, floor) if floor > 0 else likelihood

    def pmf_grid(self, symbols: Tensor) -> Tensor:
        """Unfloored probabilities of every symbol for every channel, ``(channels, M)``."""
        grid = symbols.to(self.matrices[0].dtype).unsqueeze(-1).expand(-1, self.channels)
        return self.likelihood(grid, floor=0.0).t()


class ShapeEncoder(nn.Module):
    """PointNet: shared per-point map then channelwise max pooling."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.stem = PointNetStem(channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.stem(x).max(dim=-2).values


class DetailEncoder(nn.Module):
    """Single-stage local encoder: FPS centers, KNN groups, trig embedding, max pool."""

    def __init__(self, channels: int, tokens: int, neighbors: int) -> None:
        super().__init__()
        self.tokens = tokens
        self.neighbors = neighbors
        self.embed = LocalGroupEmbedding(channels)

    def forward(self, x: Tensor) -> Tensor:
        centers = index_points(x, farthest_point_sample(x, self.tokens))
        group_idx = knn(centers, x, self.neighbors)
        relative = index_points(x, group_idx) - centers.unsqueeze(-2)
        return self.embed(relative)


class HyperEncoder(nn.Module):
    def __init__(self, channels: int, hyper_channels: int) -> None:
        super().__init__()
        self.token_map = nn.Sequential(nn.Linear(channels, channels), nn.ReLU())
        self.out = nn.Linear(channels, hyper_channels)

    def forward(self, y_h: Tensor) -> Tensor:
        return self.out(self.token_map(y_h).mean(dim=-2))


class HyperDecoder(nn.Module):
    """Maps the hyper latent to per-element Gaussian means and scales."""

    def __init__(self, hyper_channels: int, channels: int, tokens: int) -> None:
        super().__init__()
        self.hyper_channels = hyper_channels
        self.channels = channels
        self.tokens = tokens
        self.net = nn.Sequential(
            nn.Linear(hyper_channels, channels),
            nn.ReLU(),
            nn.Linear(channels, 2 * tokens * channels),
        )

    def forward(self, z_hat: Tensor) -> EntropyParams:
        if z_hat.shape[-1] != self.hyper_channels:
            raise ShapeMismatchError(
                "Hyper latent width mismatch",
                details={"expected": self.hyper_channels, "got": z_hat.shape[-1]},
            )
        out = self.net(z_hat).reshape(*z_hat.shape[:-1], 2, self.tokens, self.channels)
        mu, raw_sigma = out.unbind(dim=-3)
        return EntropyParams(mu=mu, sigma=lower_bound(F.softplus(raw_sigma), SIGMA_MIN))


@dataclass(frozen=True)
class LatentTriple:
    """Continuous latents and their quantized counterparts; disabled branches are None."""

    y_l: Optional[Tensor]
    y_h: Optional[Tensor]
    z: Optional[Tensor]
    y_l_hat: Optional[Tensor]
    y_h_hat: Optional[Tensor]
    z_hat: Optional[Tensor]


@dataclass(frozen=True)
class CompressorOutput:
    latents: LatentTriple
    likelihoods: Dict[str, Tensor]
    entropy_params: Optional[EntropyParams]


def estimate_rate(likelihoods: Mapping[str, Tensor]) -> Tensor:
    """Total bits per cloud, ``(B,)``: sum of -log2 p over every stream element."""
    total: Optional[Tensor] = None
    for name in STREAMS:
        p = likelihoods.get(name)
        if p is None:
            continue
        bits = -torch.log2(p).reshape(p.shape[0], -1).sum(dim=-1)
        total = bits if total is None else total + bits
    if total is None:
        raise ShapeMismatchError("No latent streams to estimate")
    return total


class LatentCompressor(nn.Module):
    def __init__(self, config: CompressorConfig) -> None:
        super().__init__()
        self.config = config
        C, C_z = config.C, config.C_z
        self.shape_encoder = ShapeEncoder(C) if config.use_shape_latent else None
        self.shape_density = FactorizedDensity(C) if config.use_shape_latent else None
        if config.use_detail_latent:
            self.detail_encoder = DetailEncoder(C, config.S, config.k_enc)
            self.hyper_encoder = HyperEncoder(C, C_z)
            self.hyper_decoder = HyperDecoder(C_z, C, config.S)
            self.hyper_density = FactorizedDensity(C_z)
        else:
            self.detail_encoder = None
            self.hyper_encoder = None
            self.hyper_decoder = None
            self.hyper_density = None

    def likelihoods(self, latents: LatentTriple) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        if self.shape_density is not None and latents.y_l_hat is not None:
            out["y_l"] = self.shape_density.likelihood(latents.y_l_hat)
        if self.hyper_density is not None and latents.z_hat is not None:
            out["z"] = self.hyper_density.likelihood(latents.z_hat)
            params = self.hyper_decoder(latents.z_hat)
            out["y_h"] = gaussian_conditional_likelihood(latents.y_h_hat, params)
        return out

    def estimate_rate(self, latents: LatentTriple) -> Tensor:
        return estimate_rate(self.likelihoods(latents))

    def forward(
        self, x: Tensor, mode: str = "train", generator: Optional[torch.Generator] = None
    ) -> CompressorOutput:
        y_l = y_l_hat = y_h = y_h_hat = z = z_hat = None
        likelihoods: Dict[str, Tensor] = {}
        params: Optional[EntropyParams] = None

        if self.shape_encoder is not None:
            y_l = self.shape_encoder(x)
            y_l_hat = quantize(y_l, mode, generator)
            likelihoods["y_l"] = self.shape_density.likelihood(y_l_hat)

        if self.detail_encoder is not None:
            y_h = self.detail_encoder(x)
            z = self.hyper_encoder(y_h)
            z_hat = quantize(z, mode, generator)
            likelihoods["z"] = self.hyper_density.likelihood(z_hat)
            params = self.hyper_decoder(z_hat)
            y_h_hat = quantize(y_h, mode, generator)
            likelihoods["y_h"] = gaussian_conditional_likelihood(y_h_hat, params)

        latents = LatentTriple(y_l=y_l, y_h=y_h, z=z, y_l_hat=y_l_hat, y_h_hat=y_h_hat, z_hat=z_hat)
        return CompressorOutput(latents=latents, likelihoods=likelihoods, entropy_params=params)
