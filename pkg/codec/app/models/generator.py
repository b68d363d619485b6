"""Conditional noise predictor eps_theta(x_t, t, condition)."""
import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING, Optional, Tuple

import torch
import torch.nn as nn
from torch import Tensor

from app.core.config import DenoiserConfig
from app.core.exceptions import GeometryError, NumericalError, ShapeMismatchError
from app.services.geometry import farthest_point_sample, index_points, knn

if TYPE_CHECKING:
    from app.services.schedule import NoiseSchedule

UPSAMPLE_NEIGHBORS = 3
UPSAMPLE_EPS = 1e-8


def positional_encode(points: Tensor, dim: int) -> Tensor:
    """Trigonometric embedding ``(..., 3) -> (..., dim)``.

    Layout is all sines then all cosines; inside each half the slot for
    coordinate c and band j is ``c * (dim // 6) + j``, band j using
    frequency ``2**j * pi``.
    """
    if dim <= 0 or dim % 6 != 0:
        raise ShapeMismatchError(
            "Embedding width must be a positive multiple of 6", details={"dim": dim}
        )
    bands = dim // 6
    freqs = (2.0 ** torch.arange(bands, dtype=points.dtype, device=points.device)) * math.pi
    angles = points.unsqueeze(-1) * freqs
    return torch.cat([angles.sin().flatten(-2), angles.cos().flatten(-2)], dim=-1)


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.to(torch.float32).unsqueeze(-1) * freqs
    return torch.cat([args.sin(), args.cos()], dim=-1)


class PointNetStem(nn.Sequential):
    """Shared per-point map 3 -> 64 -> 128 -> C."""

    def __init__(self, channels: int) -> None:
        super().__init__(
            nn.Linear(3, 64),
            nn.ReLU(),
            nn.Linear(64, 128),
            nn.ReLU(),
            nn.Linear(128, channels),
        )


class LocalGroupEmbedding(nn.Module):
    """Embeds grouped relative coordinates and max-pools each group."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(channels, channels)
        self.act = nn.ReLU()

    def forward(self, relative: Tensor) -> Tensor:
        # relative: (..., S, k, 3) -> (..., S, C)
        embedded = self.act(self.proj(positional_encode(relative, self.channels)))
        return embedded.max(dim=-2).values


class AdaLN(nn.Module):
    """Norm(F) * scale(cond) + shift(cond), starting as a plain LayerNorm."""

    def __init__(self, channels: int, cond_dim: int) -> None:
        super().__init__()
        self.cond_dim = cond_dim
        self.norm = nn.LayerNorm(channels, elementwise_affine=False, eps=1e-5)
        self.scale = nn.Linear(cond_dim, channels)
        self.shift = nn.Linear(cond_dim, channels)
        nn.init.zeros_(self.scale.weight)
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, features: Tensor, cond: Tensor) -> Tensor:
        if cond.shape[-1] != self.cond_dim:
            raise ShapeMismatchError(
                "Condition width mismatch",
                details={"expected": self.cond_dim, "got": cond.shape[-1]},
            )
        if cond.dim() == features.dim() - 1:
            cond = cond.unsqueeze(-2)
        elif cond.dim() != features.dim():
            raise ShapeMismatchError(
                "Condition rank does not conform to features",
                details={"features": list(features.shape), "cond": list(cond.shape)},
            )
        return self.norm(features) * self.scale(cond) + self.shift(cond)


@dataclass(frozen=True)
class ConditionSet:
    """Decoder-side guidance for one batch of clouds."""

    t: Tensor  # (B,) long
    beta_t: Tensor  # (B,)
    alpha_bar_t: Tensor  # (B,)
    label: Optional[Tensor] = None  # (B,) long, -1 = unconditioned
    y_l_hat: Optional[Tensor] = None  # (B, C)
    y_h_hat: Optional[Tensor] = None  # (B, S, C)

    @property
    def batch_size(self) -> int:
        return int(self.t.shape[0])

    @classmethod
    def for_latents(
        cls,
        t: Tensor,
        sched: "NoiseSchedule",
        y_l_hat: Optional[Tensor],
        y_h_hat: Optional[Tensor],
        label: Optional[Tensor] = None,
    ) -> "ConditionSet":
        t = t.to(torch.long).cpu()
        return cls(
            t=t,
            beta_t=sched.betas[t].to(torch.float32),
            alpha_bar_t=sched.alpha_bars[t].to(torch.float32),
            label=label,
            y_l_hat=y_l_hat,
            y_h_hat=y_h_hat,
        )

    def at_step(self, t: int, sched: "NoiseSchedule") -> "ConditionSet":
        steps = torch.full((self.batch_size,), t, dtype=torch.long)
        return replace(
            self,
            t=steps,
            beta_t=sched.betas[steps].to(torch.float32),
            alpha_bar_t=sched.alpha_bars[steps].to(torch.float32),
        )


def interpolation_weights(
    points: Tensor, centers: Tensor, k: int = UPSAMPLE_NEIGHBORS
) -> Tuple[Tensor, Tensor]:
    """Inverse squared-distance weights of each point's k nearest centers."""
    k = min(k, centers.shape[-2])
    idx = knn(points, centers, k)
    nearest = index_points(centers, idx)
    d2 = (nearest - points.unsqueeze(-2)).pow(2).sum(dim=-1)
    weights = 1.0 / (d2 + UPSAMPLE_EPS)
    return idx, weights / weights.sum(dim=-1, keepdim=True)


def _require_finite(tensor: Tensor, stage: str) -> None:
    if not bool(torch.isfinite(tensor).all()):
        raise NumericalError(f"Non-finite activations at stage '{stage}'", details={"stage": stage})


class Denoiser(nn.Module):
    """Predicts the noise in x_t from point features, latents and schedule scalars."""

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        C = config.C

        self.stem = PointNetStem(C)
        self.time_mlp = nn.Sequential(nn.Linear(C, C), nn.SiLU(), nn.Linear(C, C))
        self.schedule_proj = nn.Linear(2, C)
        self.shape_proj = nn.Linear(C, C)
        # index label_vocab is the "no label" slot
        self.label_embedding = (
            nn.Embedding(config.label_vocab + 1, C) if config.label_vocab > 0 else None
        )
        self.point_adaln = AdaLN(C, C)

        self.group_embed = LocalGroupEmbedding(C)
        self.cross_attention = nn.MultiheadAttention(C, 1, batch_first=True)
        self.token_adaln = AdaLN(C, C)
        self.self_attention = nn.MultiheadAttention(C, config.heads, batch_first=True)

        self.upsample = nn.Sequential(nn.Linear(2 * C, C), nn.SiLU())
        self.head = nn.Linear(C, 3)

    def global_condition(self, cond: ConditionSet, dtype: torch.dtype) -> Tensor:
        device = self.head.weight.device
        t = cond.t.to(device)
        g = self.time_mlp(timestep_embedding(t, self.config.C).to(dtype))
        scalars = torch.stack([cond.beta_t, cond.alpha_bar_t], dim=-1)
        scalars = scalars.to(device=device, dtype=dtype)
        g = g + self.schedule_proj(scalars)
        if self.label_embedding is not None:
            vocab = self.config.label_vocab
            if cond.label is None:
                label = torch.full_like(t, vocab)
            else:
                label = cond.label.to(device=device, dtype=torch.long)
                unknown = (label < 0) | (label >= vocab)
                label = torch.where(unknown, torch.full_like(label, vocab), label)
            g = g + self.label_embedding(label)
        if cond.y_l_hat is not None:
            g = g + self.shape_proj(cond.y_l_hat.to(device=device, dtype=dtype))
        return g

    def forward(self, x_t: Tensor, cond: ConditionSet) -> Tensor:
        cfg = self.config
        if x_t.dim() != 3 or x_t.shape[-1] != 3:
            raise ShapeMismatchError("x_t must be B x N x 3", details={"shape": list(x_t.shape)})
        if x_t.shape[1] < cfg.S:
            raise GeometryError(
                "Cloud has fewer points than generator tokens",
                details={"points": x_t.shape[1], "tokens": cfg.S},
            )
        if cond.batch_size != x_t.shape[0]:
            raise ShapeMismatchError("Condition batch does not match x_t")

        # per-point features
        features = self.stem(x_t) + positional_encode(x_t, cfg.C)
        _require_finite(features, "point_features")

        # global conditioning
        g = self.global_condition(cond, x_t.dtype)
        point_features = self.point_adaln(features, g)
        _require_finite(point_features, "global_condition")

        # tokens over FPS centers of x_t
        centers_idx = farthest_point_sample(x_t, cfg.S)
        centers = index_points(x_t, centers_idx)
        group_idx = knn(centers, x_t, min(cfg.k, x_t.shape[1]))
        grouped = index_points(point_features, group_idx)
        relative = index_points(x_t, group_idx) - centers.unsqueeze(-2)
        tokens = grouped.max(dim=-2).values + self.group_embed(relative)
        _require_finite(tokens, "tokens")

        # detail conditioning
        if cond.y_h_hat is not None:
            latent_tokens = cond.y_h_hat.to(device=x_t.device, dtype=x_t.dtype)
            token_cond, _ = self.cross_attention(
                tokens, latent_tokens, latent_tokens, need_weights=False
            )
        else:
            token_cond = g.unsqueeze(-2).expand_as(tokens)
        tokens = self.token_adaln(tokens, token_cond)
        _require_finite(tokens, "detail_condition")

        # mixing
        mixed, _ = self.self_attention(tokens, tokens, tokens, need_weights=False)
        tokens = tokens + mixed
        _require_finite(tokens, "self_attention")

        # upsampling back to every point
        up_idx, weights = interpolation_weights(x_t, centers)
        interpolated = (index_points(tokens, up_idx) * weights.unsqueeze(-1)).sum(dim=-2)
        hidden = self.upsample(torch.cat([interpolated, point_features], dim=-1))
        _require_finite(hidden, "upsampling")

        eps_hat = self.head(hidden)
        _require_finite(eps_hat, "head")
        return eps_hat
