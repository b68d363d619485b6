from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

from app.core.config import ModelConfig
from app.models.generator import ConditionSet, Denoiser
from app.models.latent_codec import CompressorOutput, LatentCompressor, LatentTriple
from app.services.schedule import NoiseSchedule, cosine_schedule


class DiffusionPointCodec(nn.Module):
    """Latent compressor plus the conditional denoiser that decodes from its latents."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.compressor = LatentCompressor(config.compressor)
        self.denoiser = Denoiser(config.denoiser)
        self.schedule: NoiseSchedule = cosine_schedule(config.T, config.cosine_offset)

    def compress(
        self, x: Tensor, mode: str = "train", generator: Optional[torch.Generator] = None
    ) -> CompressorOutput:
        return self.compressor(x, mode=mode, generator=generator)

    def condition(
        self, t: Tensor, latents: LatentTriple, label: Optional[Tensor] = None
    ) -> ConditionSet:
        return ConditionSet.for_latents(
            t, self.schedule, y_l_hat=latents.y_l_hat, y_h_hat=latents.y_h_hat, label=label
        )

    def forward(self, x_t: Tensor, cond: ConditionSet) -> Tensor:
        return self.denoiser(x_t, cond)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
