"""Rate-distortion objective and the training loop."""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import structlog
import torch
from torch import Tensor
from tqdm import tqdm

from app.core.config import LAMBDA_GRID, ModelConfig, TrainConfig
from app.core.exceptions import ConfigError, DatasetError, NumericalError
from app.models.diffpcc import DiffusionPointCodec
from app.models.latent_codec import estimate_rate
from app.schemas.records import TrainRecord
from app.services.checkpoint import save_checkpoint
from app.services.dataset import PointCloudDataset
from app.services.geometry import chamfer_distance
from app.services.schedule import MIN_ALPHA_BAR, forward_sample, predict_x0

logger = structlog.get_logger(__name__)

CLIP_BOX = 1.0


@dataclass
class LossBreakdown:
    """Batch-mean loss terms plus the random draws that produced them."""

    loss: Tensor
    d_mse: Tensor
    d_cd: Tensor
    rate: Tensor  # bits per point
    t: Tensor
    eps: Tensor

    def components(self) -> Dict[str, float]:
        return {
            "loss": float(self.loss),
            "d_mse": float(self.d_mse),
            "d_cd": float(self.d_cd),
            "rate": float(self.rate),
        }


def rd_loss(
    model: DiffusionPointCodec,
    x0: Tensor,
    cfg: TrainConfig,
    generator: torch.Generator,
    labels: Optional[Tensor] = None,
    t: Optional[Tensor] = None,
) -> LossBreakdown:
    """L = D_mse + gamma * D_cd + lambda * R for one batch of normalized clouds.

    Clouds drawn at a step whose alpha_bar is below ``MIN_ALPHA_BAR`` have no
    recoverable x0 estimate and contribute zero Chamfer distortion.
    """
    sched = model.schedule
    batch, num_points, _ = x0.shape

    if t is None:
        t = torch.randint(1, sched.T + 1, (batch,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(x0.device)
    x_t = forward_sample(x0, t, eps, sched)

    out = model.compress(x0, mode="train", generator=generator)
    cond = model.condition(t, out.latents, label=labels)
    eps_hat = model(x_t, cond)

    d_mse = (eps_hat - eps).pow(2).mean(dim=(1, 2))
    d_cd = torch.zeros_like(d_mse)
    recoverable = torch.nonzero(sched.alpha_bars[t.cpu()] >= MIN_ALPHA_BAR).flatten()
    if cfg.chamfer_weight > 0 and recoverable.numel() > 0:
        keep = recoverable.to(x0.device)
        x0_hat = predict_x0(x_t[keep], t[keep.cpu()], eps_hat[keep], sched)
        if cfg.clip_denoised:
            x0_hat = x0_hat.clamp(-CLIP_BOX, CLIP_BOX)
        d_cd = d_cd.index_put((keep,), chamfer_distance(x0[keep], x0_hat))
    rate = estimate_rate(out.likelihoods).to(d_mse.dtype) / num_points

    per_cloud = d_mse + cfg.chamfer_weight * d_cd
    if cfg.lambda_ > 0:
        per_cloud = per_cloud + cfg.lambda_ * rate
    result = LossBreakdown(
        loss=per_cloud.mean(),
        d_mse=d_mse.mean(),
        d_cd=d_cd.mean(),
        rate=rate.mean(),
        t=t,
        eps=eps,
    )
    if not all(math.isfinite(v) for v in result.components().values()):
        raise NumericalError("Non-finite rate-distortion loss", details=result.components())
    return result


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    return cfg.lr * cfg.lr_decay ** (step // cfg.lr_decay_every)


@dataclass
class TrainResult:
    model: DiffusionPointCodec
    history: List[TrainRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def train(
    dataset: PointCloudDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    device: str = "cpu",
    progress: bool = False,
) -> TrainResult:
    """Adam with step decay; fully determined by ``seed`` on a given device."""
    if len(dataset) == 0:
        raise DatasetError("Cannot train on an empty dataset")
    if cfg.T != model_cfg.T:
        raise ConfigError(
            "Training and model diffusion lengths differ",
            details={"train_T": cfg.T, "model_T": model_cfg.T},
        )

    torch.manual_seed(seed)
    model = DiffusionPointCodec(model_cfg).to(device).train()
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2)
    )
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=cfg.lr_decay_every, gamma=cfg.lr_decay
    )
    generator = torch.Generator().manual_seed(seed)
    use_labels = model_cfg.denoiser.label_vocab > 0

    out_path = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        metrics_file = (out_path / "metrics.jsonl").open("w", encoding="utf-8")

    result = TrainResult(model=model)
    log = logger.bind(lam=cfg.lambda_, gamma=cfg.chamfer_weight, seed=seed)
    log.info("training_started", steps=cfg.steps, batch=cfg.batch, clouds=len(dataset))
    try:
        for step in tqdm(range(cfg.steps), disable=not progress, desc="train"):
            points, labels = dataset.sample_batch(cfg.batch, cfg.points_per_cloud, generator)
            points = points.to(device)
            labels = labels.to(device) if (use_labels and labels is not None) else None

            lr = optimizer.param_groups[0]["lr"]
            breakdown = rd_loss(model, points, cfg, generator, labels)
            optimizer.zero_grad(set_to_none=True)
            breakdown.loss.backward()
            optimizer.step()
            scheduler.step()

            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                values = breakdown.components()
                record = TrainRecord(
                    step=step,
                    loss=values["loss"],
                    d_mse=values["d_mse"],
                    d_cd=values["d_cd"],
                    bpp_est=values["rate"],
                    lr=lr,
                )
                result.history.append(record)
                log.info("train_step", **record.model_dump())
                if metrics_file is not None:
                    metrics_file.write(json.dumps(record.model_dump()) + "\n")
                    metrics_file.flush()

            if out_path is not None and (step + 1) % cfg.checkpoint_every == 0:
                path = save_checkpoint(model, out_path / f"step_{step + 1:06d}.ckpt", cfg, step + 1)
                result.checkpoints.append(path)
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if out_path is not None:
        result.checkpoints.append(save_checkpoint(model, out_path / "model.ckpt", cfg, cfg.steps))
    log.info("training_finished", steps=cfg.steps)
    return result


def sweep_dir_name(lam: float) -> str:
    return f"lambda_{lam:g}"


def train_sweep(
    dataset: PointCloudDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    lambdas: Sequence[float] = LAMBDA_GRID,
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    device: str = "cpu",
    progress: bool = False,
) -> Dict[float, TrainResult]:
    """One model per rate point; each run goes to ``<out_dir>/lambda_<value>``."""
    if not lambdas:
        raise ConfigError("Sweep needs at least one lambda")
    if len(set(lambdas)) != len(lambdas):
        raise ConfigError("Sweep lambdas must be distinct", details={"lambdas": list(lambdas)})
    if any(lam < 0 for lam in lambdas):
        raise ConfigError("Sweep lambdas must be nonnegative", details={"lambdas": list(lambdas)})

    results: Dict[float, TrainResult] = {}
    for lam in lambdas:
        run_cfg = cfg.model_copy(update={"lambda_": float(lam)})
        run_dir = Path(out_dir) / sweep_dir_name(lam) if out_dir is not None else None
        results[float(lam)] = train(
            dataset, model_cfg, run_cfg, seed=seed, out_dir=run_dir, device=device,
            progress=progress,
        )
    return results


@torch.no_grad()
def mean_chamfer(
    model: DiffusionPointCodec,
    points: Tensor,
    cfg: TrainConfig,
    seed: int = 0,
    repeats: int = 4,
    labels: Optional[Tensor] = None,
) -> float:
    """D_cd averaged over ``repeats`` seeded (t, eps) draws; a stable progress measure."""
    generator = torch.Generator().manual_seed(seed)
    measure = cfg.model_copy(update={"use_chamfer": True, "gamma": max(cfg.gamma, 1.0)})
    total = 0.0
    for _ in range(repeats):
        total += float(rd_loss(model, points, measure, generator, labels).d_cd)
    return total / repeats
