"""Point cloud primitives: normalization, sampling/grouping and distortion metrics.

Every function accepts either a ``PointCloud`` or a raw ``(..., N, 3)`` tensor.
Sampling and grouping functions are batched over any leading dimension;
the metric functions take single clouds and work in float64.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch
from torch import Tensor

from app.core.exceptions import GeometryError

PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class PointCloud:
    points: Tensor
    label: Optional[int] = None

    def __post_init__(self) -> None:
        if self.points.dim() != 2 or self.points.shape[-1] != 3:
            raise GeometryError(
                "Point cloud must be an N x 3 array", details={"shape": list(self.points.shape)}
            )
        if self.points.shape[0] < 1:
            raise GeometryError("Point cloud is empty")
        if not bool(torch.isfinite(self.points).all()):
            raise GeometryError("Point cloud has non-finite coordinates")
        if self.label is not None and self.label < 0:
            raise GeometryError(
                "Label must be a non-negative integer", details={"label": self.label}
            )

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])


@dataclass(frozen=True)
class NormalizationParams:
    center: Tuple[float, float, float]
    scale: float

    def __post_init__(self) -> None:
        if not self.scale > 0:
            raise GeometryError(
                "Normalization scale must be positive", details={"scale": self.scale}
            )


CloudLike = Union[PointCloud, Tensor]


def _coords(cloud: CloudLike) -> Tensor:
    return cloud.points if isinstance(cloud, PointCloud) else cloud


def normalize(pc: PointCloud) -> Tuple[PointCloud, NormalizationParams]:
    """Center on the centroid and scale the farthest point onto the unit sphere."""
    points = pc.points
    if not bool(torch.isfinite(points).all()):
        raise GeometryError("Cannot normalize non-finite coordinates")

    work = points.double()
    center = work.mean(dim=0)
    radius = float((work - center).norm(dim=-1).max())
    scale = radius if radius >= 1e-12 else 1.0

    params = NormalizationParams(center=tuple(float(c) for c in center), scale=scale)
    return apply_normalization(pc, params), params


def apply_normalization(pc: PointCloud, params: NormalizationParams) -> PointCloud:
    work = pc.points.double()
    center = torch.tensor(params.center, dtype=torch.float64, device=work.device)
    normalized = ((work - center) / params.scale).to(pc.points.dtype)
    return PointCloud(normalized, label=pc.label)


def denormalize(pc: PointCloud, params: NormalizationParams) -> PointCloud:
    work = pc.points.double()
    center = torch.tensor(params.center, dtype=torch.float64, device=work.device)
    restored = work * params.scale + center
    return PointCloud(restored.to(pc.points.dtype), label=pc.label)


def square_distance(src: Tensor, dst: Tensor) -> Tensor:
    """Pairwise squared distances, ``(..., M, 3) x (..., N, 3) -> (..., M, N)``.

    Computed from explicit differences so that equal distances compare equal
    and tie-breaking stays exact.
    """
    diff = src.unsqueeze(-2) - dst.unsqueeze(-3)
    return diff.pow(2).sum(dim=-1)


def index_points(points: Tensor, idx: Tensor) -> Tensor:
    """Gather rows: points ``(B, N, C)``, idx ``(B, ...)`` -> ``(B, ..., C)``."""
    batch = points.shape[0]
    flat = idx.reshape(batch, -1)
    gathered = torch.gather(points, 1, flat.unsqueeze(-1).expand(-1, -1, points.shape[-1]))
    return gathered.reshape(*idx.shape, points.shape[-1])


def farthest_point_sample(cloud: CloudLike, num_samples: int) -> Tensor:
    """Greedy maximin subset, seeded at index 0; ties go to the lowest index."""
    xyz = _coords(cloud)
    squeeze = xyz.dim() == 2
    if squeeze:
        xyz = xyz.unsqueeze(0)
    batch, n, _ = xyz.shape
    if not 1 <= num_samples <= n:
        raise GeometryError(
            "Sample count must lie in [1, N]", details={"samples": num_samples, "points": n}
        )

    device = xyz.device
    centroids = torch.zeros(batch, num_samples, dtype=torch.long, device=device)
    distance = torch.full((batch, n), math.inf, dtype=xyz.dtype, device=device)
    farthest = torch.zeros(batch, dtype=torch.long, device=device)
    batch_indices = torch.arange(batch, device=device)
    for i in range(num_samples):
        centroids[:, i] = farthest
        centroid = xyz[batch_indices, farthest].unsqueeze(1)
        dist = (xyz - centroid).pow(2).sum(dim=-1)
        distance = torch.minimum(distance, dist)
        # selected points can never win again, even among duplicates
        distance[batch_indices, farthest] = -1.0
        farthest = torch.argmax(distance, dim=-1)
    return centroids[0] if squeeze else centroids


def knn(query: CloudLike, reference: CloudLike, k: int) -> Tensor:
    """Indices of the k nearest reference points per query, nearest first."""
    q = _coords(query)
    ref = _coords(reference)
    n = ref.shape[-2]
    if not 1 <= k <= n:
        raise GeometryError("Neighbor count must lie in [1, N]", details={"k": k, "points": n})
    dist = square_distance(q, ref)
    # stable sort keeps the lowest index first among equal distances
    order = torch.sort(dist, dim=-1, stable=True).indices
    return order[..., :k]


def _directional_mse(a: Tensor, b: Tensor) -> Tuple[Tensor, Tensor]:
    dist = square_distance(a, b)
    return dist.min(dim=-1).values.mean(dim=-1), dist.min(dim=-2).values.mean(dim=-1)


def _require_nonempty(*clouds: Tensor) -> None:
    for cloud in clouds:
        if cloud.shape[-2] == 0:
            raise GeometryError("Metric undefined on an empty point cloud")


def chamfer_distance(a: CloudLike, b: CloudLike) -> Tensor:
    """Symmetric sum of mean squared nearest-neighbor distances.

    Batched inputs ``(B, N, 3)`` give a ``(B,)`` tensor; the result stays
    differentiable so the training loss can use it directly.
    """
    x, y = _coords(a), _coords(b)
    _require_nonempty(x, y)
    a_to_b, b_to_a = _directional_mse(x, y)
    return a_to_b + b_to_a


def d1_psnr(a: CloudLike, b: CloudLike, peak: float = 1.0) -> float:
    """Point-to-point PSNR using the worse of the two directional errors."""
    if not peak > 0:
        raise GeometryError("PSNR peak must be positive", details={"peak": peak})
    x, y = _coords(a).double(), _coords(b).double()
    _require_nonempty(x, y)
    a_to_b, b_to_a = _directional_mse(x, y)
    mse = max(float(a_to_b), float(b_to_a))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def bounding_diagonal(cloud: CloudLike) -> float:
    points = _coords(cloud).double()
    return float((points.max(dim=-2).values - points.min(dim=-2).values).norm())
