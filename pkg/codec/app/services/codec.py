"""End-to-end encode/decode of single point clouds through a trained model."""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
from pydantic import ValidationError
from torch import Tensor

from app.core.exceptions import ContainerError, GeometryError, ModelMismatchError
from app.models.diffpcc import DiffusionPointCodec
from app.models.generator import ConditionSet
from app.models.latent_codec import (
    EntropyParams,
    FactorizedDensity,
    LatentCompressor,
    LatentTriple,
    gaussian_conditional_likelihood,
)
from app.schemas.records import ContainerHeader, EncodeSummary
from app.services.cdf import CdfTable, build_tables, symbol_grid
from app.services.container import STREAM_NAMES, pack_container, unpack_container
from app.services.geometry import (
    NormalizationParams,
    PointCloud,
    apply_normalization,
    denormalize,
    normalize,
)
from app.services.range_coder import clamp_symbols, rc_decode, rc_encode
from app.services.schedule import generate

logger = structlog.get_logger(__name__)

Payloads = Tuple[bytes, bytes, bytes]


def compute_bpp(num_bytes: int, num_points: int) -> float:
    if num_points < 1:
        raise GeometryError("bpp needs at least one point", details={"N": num_points})
    return 8.0 * num_bytes / num_points


def _to_symbols(values: Tensor) -> List[int]:
    return [int(v) for v in values.detach().cpu().reshape(-1).round().to(torch.int64).tolist()]


def _as_float32(params: NormalizationParams) -> NormalizationParams:
    # the container stores f32, so both sides must normalize with the stored values
    center = tuple(float(c) for c in np.asarray(params.center, dtype=np.float32))
    return NormalizationParams(center=center, scale=float(np.float32(params.scale)))


class LatentStreamCoder:
    """Range-codes quantized latents against tables derived from the entropy models."""

    def __init__(self, compressor: LatentCompressor) -> None:
        self.compressor = compressor
        self.config = compressor.config

    @staticmethod
    @torch.no_grad()
    def _factorized_tables(density: FactorizedDensity) -> List[CdfTable]:
        grid = symbol_grid(dtype=density.matrices[0].dtype).to(density.matrices[0].device)
        return build_tables(density.pmf_grid(grid).double().cpu().numpy())

    @torch.no_grad()
    def detail_tables(self, z_hat: Tensor) -> List[CdfTable]:
        """One Gaussian table per element of y_h, row-major over (S, C)."""
        params = self.compressor.hyper_decoder(z_hat)
        mu = params.mu.reshape(-1, 1).double().cpu()
        sigma = params.sigma.reshape(-1, 1).double().cpu()
        grid = symbol_grid().unsqueeze(0)
        pmfs = gaussian_conditional_likelihood(grid, EntropyParams(mu=mu, sigma=sigma), floor=0.0)
        return build_tables(pmfs.numpy())

    def shape_tables(self) -> List[CdfTable]:
        return self._factorized_tables(self.compressor.shape_density)

    def hyper_tables(self) -> List[CdfTable]:
        return self._factorized_tables(self.compressor.hyper_density)

    def _hyper_tensor(self, symbols: Sequence[int]) -> Tensor:
        device = self.compressor.hyper_decoder.net[0].weight.device
        return torch.tensor(symbols, dtype=torch.float32, device=device).reshape(1, -1)

    def encode(self, latents: LatentTriple) -> Tuple[Payloads, int]:
        """Payloads in container order plus the number of clamped symbols."""
        y_l_bytes = z_bytes = y_h_bytes = b""
        clamped = 0

        if self.config.use_shape_latent:
            tables = self.shape_tables()
            symbols, changed = clamp_symbols(_to_symbols(latents.y_l_hat), tables)
            y_l_bytes = rc_encode(symbols, tables, stream="y_l")
            clamped += changed

        if self.config.use_detail_latent:
            tables = self.hyper_tables()
            z_symbols, changed = clamp_symbols(_to_symbols(latents.z_hat), tables)
            z_bytes = rc_encode(z_symbols, tables, stream="z")
            clamped += changed

            # tables come from the clamped z the decoder will actually see
            detail = self.detail_tables(self._hyper_tensor(z_symbols))
            symbols, changed = clamp_symbols(_to_symbols(latents.y_h_hat), detail)
            y_h_bytes = rc_encode(symbols, detail, stream="y_h")
            clamped += changed

        return (y_l_bytes, z_bytes, y_h_bytes), clamped

    def decode(self, payloads: Payloads) -> LatentTriple:
        cfg = self.config
        y_l_bytes, z_bytes, y_h_bytes = payloads
        present = {name: bool(p) for name, p in zip(STREAM_NAMES, payloads)}
        expected = {
            "y_l": cfg.use_shape_latent,
            "z": cfg.use_detail_latent,
            "y_h": cfg.use_detail_latent,
        }
        if present != expected:
            raise ModelMismatchError(
                "Container streams do not match the model's latent branches",
                details={"present": present, "expected": expected},
            )

        y_l_hat = z_hat = y_h_hat = None
        if cfg.use_shape_latent:
            tables = self.shape_tables()
            y_l_hat = torch.tensor(rc_decode(y_l_bytes, tables, len(tables)), dtype=torch.float32)
            y_l_hat = y_l_hat.reshape(1, cfg.C)
        if cfg.use_detail_latent:
            tables = self.hyper_tables()
            z_symbols = rc_decode(z_bytes, tables, len(tables))
            z_hat = self._hyper_tensor(z_symbols)
            detail = self.detail_tables(z_hat)
            y_h_hat = torch.tensor(rc_decode(y_h_bytes, detail, len(detail)), dtype=torch.float32)
            y_h_hat = y_h_hat.reshape(1, cfg.S, cfg.C)
            z_hat = z_hat.cpu()
        return LatentTriple(
            y_l=None, y_h=None, z=None, y_l_hat=y_l_hat, y_h_hat=y_h_hat, z_hat=z_hat
        )


@dataclass(frozen=True)
class EncodedCloud:
    data: bytes
    header: ContainerHeader
    summary: EncodeSummary


class PointCloudCodec:
    def __init__(self, model: DiffusionPointCodec, device: str = "cpu") -> None:
        self.model = model.to(device).eval()
        self.device = torch.device(device)
        self.config = model.config
        self.streams = LatentStreamCoder(model.compressor)

    def encode(self, pc: PointCloud, seed: int = 0, label: Optional[int] = None) -> EncodedCloud:
        cfg = self.config
        if pc.num_points < cfg.compressor.S:
            raise GeometryError(
                "Cloud has fewer points than latent tokens",
                details={"points": pc.num_points, "tokens": cfg.compressor.S},
            )
        label = pc.label if label is None else label

        _, raw_params = normalize(pc)
        params = _as_float32(raw_params)
        x = apply_normalization(pc, params).points.to(self.device, torch.float32).unsqueeze(0)

        with torch.no_grad():
            latents = self.model.compress(x, mode="test").latents
        payloads, clamped = self.streams.encode(latents)

        try:
            header = ContainerHeader(
                N=pc.num_points,
                S=cfg.compressor.S,
                C=cfg.compressor.C,
                C_z=cfg.compressor.C_z,
                T=cfg.T,
                seed=seed,
                label=-1 if label is None else label,
                center=params.center,
                scale=params.scale,
            )
        except ValidationError as exc:
            raise ContainerError(
                "Cannot describe cloud in a container header", details={"errors": str(exc)}
            )
        data = pack_container(header, payloads)
        summary = EncodeSummary(
            N=pc.num_points,
            bytes=len(data),
            bpp=compute_bpp(len(data), pc.num_points),
            stream_bits={name: 8 * len(p) for name, p in zip(STREAM_NAMES, payloads)},
            clamped=clamped,
        )
        logger.info("cloud_encoded", **summary.model_dump())
        return EncodedCloud(data=data, header=header, summary=summary)

    def check_header(self, header: ContainerHeader) -> None:
        cfg = self.config
        expected = {
            "C": cfg.compressor.C,
            "C_z": cfg.compressor.C_z,
            "S": cfg.compressor.S,
            "T": cfg.T,
        }
        found = {name: getattr(header, name) for name in expected}
        if found != expected:
            raise ModelMismatchError(
                "Container dimensions do not match the model",
                details={"model": expected, "container": found},
            )

    def decode(self, data: bytes, seed: Optional[int] = None) -> PointCloud:
        """Reconstruct a cloud; ``seed`` overrides the header seed for multi-sample decoding."""
        header, payloads = unpack_container(data)
        self.check_header(header)
        latents = self.streams.decode(payloads)

        label = header.label_or_none
        cond = ConditionSet.for_latents(
            torch.full((1,), header.T, dtype=torch.long),
            self.model.schedule,
            y_l_hat=latents.y_l_hat,
            y_h_hat=latents.y_h_hat,
            label=None if label is None else torch.tensor([label], dtype=torch.long),
        )
        x = generate(
            self.model.denoiser,
            cond,
            header.N,
            self.model.schedule,
            seed=header.seed if seed is None else seed,
            device=self.device,
        )
        params = NormalizationParams(center=header.center, scale=header.scale)
        restored = denormalize(PointCloud(x[0].detach().cpu()), params)
        logger.info("cloud_decoded", N=header.N, seed=header.seed if seed is None else seed)
        return PointCloud(restored.points, label=label)
