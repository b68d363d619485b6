"""Compression metrics, RD reports and Bjontegaard deltas.

BD metrics follow the classic definition: cubic fits of PSNR against
log10(bpp) (and the inverse fit for rate), integrated over the overlap of
the two curves. Curve A is the anchor, curve B the candidate.
"""
import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import structlog
import torch

from app.core.config import ModelConfig
from app.core.exceptions import EvaluationError
from app.schemas.records import CloudEvalRecord, RdRow
from app.services.checkpoint import load_checkpoint
from app.services.codec import PointCloudCodec, compute_bpp
from app.services.dataset import subsample
from app.services.geometry import (
    NormalizationParams,
    PointCloud,
    apply_normalization,
    bounding_diagonal,
    chamfer_distance,
    d1_psnr,
)

logger = structlog.get_logger(__name__)

CSV_COLUMNS = ("lambda", "bpp", "psnr_d1", "chamfer")
MIN_CURVE_POINTS = 4


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr: float

    def __post_init__(self) -> None:
        if not self.bpp > 0:
            raise EvaluationError("RD points need a positive bpp", details={"bpp": self.bpp})


def _curve(points: Sequence[RdPoint], name: str) -> Tuple[np.ndarray, np.ndarray]:
    if len(points) < MIN_CURVE_POINTS:
        raise EvaluationError(
            f"Curve {name} needs at least {MIN_CURVE_POINTS} points",
            details={"points": len(points)},
        )
    ordered = sorted(points, key=lambda p: p.bpp)
    log_rate = np.log10(np.array([p.bpp for p in ordered], dtype=np.float64))
    psnr = np.array([p.psnr for p in ordered], dtype=np.float64)
    return log_rate, psnr


def _mean_gap(x_a: np.ndarray, y_a: np.ndarray, x_b: np.ndarray, y_b: np.ndarray) -> float:
    """Mean of (fit_b - fit_a) over the overlap of the x ranges."""
    lo = max(x_a.min(), x_b.min())
    hi = min(x_a.max(), x_b.max())
    if not hi > lo:
        raise EvaluationError(
            "RD curves do not overlap", details={"low": float(lo), "high": float(hi)}
        )
    int_a = np.polyint(np.polyfit(x_a, y_a, 3))
    int_b = np.polyint(np.polyfit(x_b, y_b, 3))
    area_a = np.polyval(int_a, hi) - np.polyval(int_a, lo)
    area_b = np.polyval(int_b, hi) - np.polyval(int_b, lo)
    return float((area_b - area_a) / (hi - lo))


def bd_psnr(curve_a: Sequence[RdPoint], curve_b: Sequence[RdPoint]) -> float:
    """Average PSNR gain of B over A in dB."""
    rate_a, psnr_a = _curve(curve_a, "A")
    rate_b, psnr_b = _curve(curve_b, "B")
    return _mean_gap(rate_a, psnr_a, rate_b, psnr_b)


def bd_rate(curve_a: Sequence[RdPoint], curve_b: Sequence[RdPoint]) -> float:
    """Average rate change of B relative to A in percent; negative means B saves bits."""
    rate_a, psnr_a = _curve(curve_a, "A")
    rate_b, psnr_b = _curve(curve_b, "B")
    gap = _mean_gap(psnr_a, rate_a, psnr_b, rate_b)
    return 100.0 * (10.0**gap - 1.0)


def write_rd_csv(rows: Sequence[RdRow], path: Union[str, Path]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) for v in (row.lambda_, row.bpp, row.psnr_d1, row.chamfer)])
    return target


def read_rd_csv(path: Union[str, Path]) -> List[RdRow]:
    try:
        with Path(path).open(newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise EvaluationError(
                    f"Unexpected RD columns in {path}",
                    details={"expected": list(CSV_COLUMNS), "found": reader.fieldnames},
                )
            return [RdRow(**{k: float(v) for k, v in record.items()}) for record in reader]
    except OSError as exc:
        raise EvaluationError(f"Cannot read RD report {path}: {exc}")
    except ValueError as exc:
        raise EvaluationError(f"Malformed RD report {path}: {exc}")


def rd_points(rows: Sequence[RdRow]) -> List[RdPoint]:
    return [RdPoint(bpp=row.bpp, psnr=row.psnr_d1) for row in rows]


def plot_rd_curves(
    curves: Sequence[Tuple[str, Sequence[RdRow]]], path: Union[str, Path]
) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, rows in curves:
        ordered = sorted(rows, key=lambda r: r.bpp)
        ax.plot([r.bpp for r in ordered], [r.psnr_d1 for r in ordered], marker="o", label=name)
    ax.set_xlabel("bpp")
    ax.set_ylabel("D1 PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return target


def _distortion(
    original: PointCloud,
    decoded: PointCloud,
    params: NormalizationParams,
    peak: float,
    denormalized: bool,
) -> Tuple[float, float]:
    if denormalized:
        a, b = original, decoded
        peak = bounding_diagonal(original)
    else:
        a, b = apply_normalization(original, params), apply_normalization(decoded, params)
    psnr = d1_psnr(a, b, peak=peak)
    chamfer = float(chamfer_distance(a.points.double(), b.points.double()))
    return psnr, chamfer


def evaluate_checkpoint(
    codec: PointCloudCodec,
    clouds: Sequence[Tuple[str, PointCloud]],
    lam: float,
    seed: int = 0,
    samples: int = 1,
    peak: float = 1.0,
    denormalized: bool = False,
) -> List[CloudEvalRecord]:
    """Encode and decode every cloud; distortion averages over ``samples`` decoder seeds."""
    if samples < 1:
        raise EvaluationError("samples must be at least 1", details={"samples": samples})
    records = []
    for name, pc in clouds:
        started = time.perf_counter()
        encoded = codec.encode(pc, seed=seed)
        encode_seconds = time.perf_counter() - started

        started = time.perf_counter()
        psnr_total = chamfer_total = 0.0
        header = encoded.header
        params = NormalizationParams(center=header.center, scale=header.scale)
        for i in range(samples):
            decoded = codec.decode(encoded.data, seed=header.seed + i)
            psnr, chamfer = _distortion(pc, decoded, params, peak, denormalized)
            psnr_total += psnr
            chamfer_total += chamfer
        decode_seconds = (time.perf_counter() - started) / samples

        records.append(
            CloudEvalRecord(
                lambda_=lam,
                path=str(name),
                N=pc.num_points,
                bpp=compute_bpp(len(encoded.data), pc.num_points),
                psnr_d1=psnr_total / samples,
                chamfer=chamfer_total / samples,
                encode_seconds=encode_seconds,
                decode_seconds=decode_seconds,
            )
        )
    return records


def evaluate_codec(
    checkpoints: Sequence[Union[str, Path]],
    clouds: Sequence[Tuple[str, PointCloud]],
    out_csv: Union[str, Path],
    expected: Optional[ModelConfig] = None,
    seed: int = 0,
    samples: int = 1,
    peak: float = 1.0,
    denormalized: bool = False,
    num_points: Optional[int] = None,
    device: str = "cpu",
) -> List[RdRow]:
    """One RD row per checkpoint; writes the CSV, a per-cloud JSONL log and an RD plot."""
    if not checkpoints:
        raise EvaluationError("No checkpoints to evaluate")
    if not clouds:
        raise EvaluationError("No clouds to evaluate")
    if num_points is not None:
        generator = torch.Generator().manual_seed(seed)
        clouds = [
            (name, PointCloud(subsample(pc.points, num_points, generator), label=pc.label))
            for name, pc in clouds
        ]

    out_csv = Path(out_csv)
    log_path = out_csv.with_suffix(".jsonl")
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    rows: List[RdRow] = []
    with log_path.open("w", encoding="utf-8") as log_file:
        for checkpoint in checkpoints:
            model, manifest = load_checkpoint(checkpoint, expected=expected)
            if manifest.train_config is None:
                raise EvaluationError(
                    "Checkpoint does not record its training configuration",
                    details={"checkpoint": str(checkpoint)},
                )
            lam = manifest.train_config.lambda_
            codec = PointCloudCodec(model, device=device)
            records = evaluate_checkpoint(
                codec, clouds, lam, seed=seed, samples=samples, peak=peak, denormalized=denormalized
            )
            for record in records:
                log_file.write(json.dumps(record.model_dump(by_alias=True)) + "\n")

            row = RdRow(
                lambda_=lam,
                bpp=float(np.mean([r.bpp for r in records])),
                psnr_d1=float(np.mean([r.psnr_d1 for r in records])),
                chamfer=float(np.mean([r.chamfer for r in records])),
            )
            rows.append(row)
            logger.info(
                "checkpoint_evaluated",
                checkpoint=str(checkpoint),
                encode_seconds=float(np.mean([r.encode_seconds for r in records])),
                decode_seconds=float(np.mean([r.decode_seconds for r in records])),
                **row.model_dump(by_alias=True),
            )

    write_rd_csv(rows, out_csv)
    plot_rd_curves([("candidate", rows)], out_csv.with_suffix(".png"))
    return rows
