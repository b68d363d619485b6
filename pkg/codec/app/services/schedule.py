"""Noise schedule and the DDPM forward/reverse sampling algebra.

Timesteps run over 1..T. Tables are padded at index 0 so that
``alpha_bar[0] == 1`` stands for the clean signal.
"""
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional, Union

import structlog
import torch
from torch import Tensor

from app.core.exceptions import NumericalError, ScheduleError

if TYPE_CHECKING:
    from app.models.generator import ConditionSet

logger = structlog.get_logger(__name__)

BETA_MIN = 1e-6
BETA_MAX = 0.999
MIN_ALPHA_BAR = 1e-8

Timestep = Union[int, Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: Tensor  # (T + 1,), betas[0] = 0
    alphas: Tensor  # (T + 1,), alphas[0] = 1
    alpha_bars: Tensor  # (T + 1,), alpha_bars[0] = 1

    def posterior_variance(self, t: int) -> float:
        """sigma_t^2 = (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta_t."""
        self._check_step(t)
        ab_t = float(self.alpha_bars[t])
        ab_prev = float(self.alpha_bars[t - 1])
        return (1.0 - ab_prev) / (1.0 - ab_t) * float(self.betas[t])

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError("Timestep out of range", details={"t": t, "T": self.T})


def cosine_alpha_bar(T: int, s: float = 0.008) -> Tensor:
    """Unclipped ``f(t) / f(0)`` for t = 0..T."""
    if T < 1:
        raise ScheduleError("Schedule needs at least one step", details={"T": T})
    steps = torch.arange(T + 1, dtype=torch.float64)
    f = torch.cos(((steps / T + s) / (1 + s)) * math.pi / 2).pow(2)
    return f / f[0]


def cosine_schedule(T: int, s: float = 0.008) -> NoiseSchedule:
    raw = cosine_alpha_bar(T, s)
    betas = (1.0 - raw[1:] / raw[:-1]).clamp(BETA_MIN, BETA_MAX)
    betas = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
    alphas = 1.0 - betas
    # recomputed as a running product so the product identity holds after clipping
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _coefficient(table: Tensor, t: Timestep, like: Tensor) -> Tensor:
    """Look up per-sample scalars and shape them to broadcast over ``like``."""
    if isinstance(t, Tensor) and t.dim() > 0:
        values = table[t.to(torch.long).cpu()]
        values = values.view(*values.shape, *([1] * (like.dim() - values.dim())))
    else:
        values = table[int(t)]
    return values.to(device=like.device, dtype=like.dtype)


def _check_range(t: Timestep, sched: NoiseSchedule, lowest: int = 1) -> None:
    steps = t if isinstance(t, Tensor) else torch.tensor(int(t))
    if bool((steps < lowest).any()) or bool((steps > sched.T).any()):
        raise ScheduleError("Timestep out of range", details={"T": sched.T})


def forward_sample(x0: Tensor, t: Timestep, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if x0.shape != eps.shape:
        raise ScheduleError(
            "Noise shape must match the clean cloud",
            details={"x0": list(x0.shape), "eps": list(eps.shape)},
        )
    _check_range(t, sched, lowest=0)
    ab = _coefficient(sched.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def predict_x0(x_t: Tensor, t: Timestep, eps_hat: Tensor, sched: NoiseSchedule) -> Tensor:
    """Invert ``forward_sample`` given a noise estimate."""
    if x_t.shape != eps_hat.shape:
        raise ScheduleError("Noise estimate shape must match x_t")
    _check_range(t, sched, lowest=0)
    ab = _coefficient(sched.alpha_bars, t, x_t)
    if bool((ab < MIN_ALPHA_BAR).any()):
        raise NumericalError(
            "alpha_bar too small to recover x0", details={"min_alpha_bar": MIN_ALPHA_BAR}
        )
    return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def reverse_step(
    x_t: Tensor, t: int, eps_hat: Tensor, sched: NoiseSchedule, noise: Optional[Tensor]
) -> Tensor:
    """One ancestral step x_t -> x_{t-1}; no noise is added at t = 1."""
    sched._check_step(t)
    beta = float(sched.betas[t])
    alpha = float(sched.alphas[t])
    ab = float(sched.alpha_bars[t])
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    if t == 1 or noise is None:
        return mean
    return mean + math.sqrt(sched.posterior_variance(t)) * noise


Denoiser = Callable[[Tensor, "ConditionSet"], Tensor]


@torch.no_grad()
def generate(
    denoiser: Denoiser,
    cond: "ConditionSet",
    num_points: int,
    sched: NoiseSchedule,
    seed: int,
    device: Optional[torch.device] = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Run the reverse chain from x_T ~ N(0, I).

    Noise is drawn from one CPU generator seeded with ``seed``: first x_T,
    then one draw per step for t = T..2. Output shape is ``(B, N, 3)`` with
    B taken from the condition set.
    """
    generator = torch.Generator().manual_seed(int(seed))
    shape = (cond.batch_size, num_points, 3)
    x = torch.randn(shape, generator=generator, dtype=dtype).to(device or "cpu")

    for t in range(sched.T, 0, -1):
        step_cond = cond.at_step(t, sched)
        eps_hat = denoiser(x, step_cond)
        noise = None
        if t > 1:
            noise = torch.randn(shape, generator=generator, dtype=dtype).to(x.device)
        x = reverse_step(x, t, eps_hat, sched, noise)
        if not bool(torch.isfinite(x).all()):
            raise NumericalError("Non-finite values in reverse diffusion", details={"step": t})
    logger.debug("generation_complete", steps=sched.T, points=num_points, seed=seed)
    return x
