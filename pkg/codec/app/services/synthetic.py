"""Seeded surface samples of simple solids, used as labelled fixture clouds."""
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import structlog
import torch
from torch import Tensor

from app.core.exceptions import DatasetError
from app.services.geometry import PointCloud
from app.services.ply import save_pointcloud

logger = structlog.get_logger(__name__)

Sampler = Callable[[int, torch.Generator], Tensor]


def _uniform(n: int, generator: torch.Generator, low: float = 0.0, high: float = 1.0) -> Tensor:
    return low + (high - low) * torch.rand(n, generator=generator, dtype=torch.float64)


def _sphere(n: int, generator: torch.Generator) -> Tensor:
    v = torch.randn(n, 3, generator=generator, dtype=torch.float64)
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def _ellipsoid(n: int, generator: torch.Generator) -> Tensor:
    return _sphere(n, generator) * torch.tensor([1.0, 0.6, 0.4], dtype=torch.float64)


def _torus(n: int, generator: torch.Generator, major: float = 1.0, minor: float = 0.35) -> Tensor:
    u = _uniform(n, generator, 0.0, 2 * math.pi)
    v = _uniform(n, generator, 0.0, 2 * math.pi)
    ring = major + minor * torch.cos(v)
    return torch.stack([ring * torch.cos(u), ring * torch.sin(u), minor * torch.sin(v)], dim=-1)


def _cube(n: int, generator: torch.Generator) -> Tensor:
    points = _uniform(3 * n, generator, -1.0, 1.0).reshape(n, 3)
    axis = torch.randint(0, 3, (n,), generator=generator)
    side = torch.randint(0, 2, (n,), generator=generator).to(torch.float64) * 2 - 1
    points[torch.arange(n), axis] = side
    return points


def _cylinder(n: int, generator: torch.Generator) -> Tensor:
    angle = _uniform(n, generator, 0.0, 2 * math.pi)
    # caps take their share of the surface area: 2 pi r^2 vs 2 pi r h with r = 1, h = 2
    on_cap = _uniform(n, generator) < (1.0 / 3.0)
    radius = torch.where(on_cap, _uniform(n, generator).sqrt(), torch.ones(n, dtype=torch.float64))
    height = torch.where(
        on_cap,
        torch.sign(_uniform(n, generator, -1.0, 1.0)),
        _uniform(n, generator, -1.0, 1.0),
    )
    return torch.stack([radius * torch.cos(angle), radius * torch.sin(angle), height], dim=-1)


def _cone(n: int, generator: torch.Generator) -> Tensor:
    angle = _uniform(n, generator, 0.0, 2 * math.pi)
    # area density grows linearly towards the base
    s = _uniform(n, generator).sqrt()
    return torch.stack([s * torch.cos(angle), s * torch.sin(angle), 1.0 - 2.0 * s], dim=-1)


def _capsule(n: int, generator: torch.Generator, radius: float = 0.5) -> Tensor:
    points = _sphere(n, generator) * radius
    shift = torch.where(points[:, 2] >= 0, 0.5, -0.5).to(torch.float64)
    points[:, 2] = points[:, 2] + shift
    on_side = _uniform(n, generator) < 0.5
    angle = _uniform(n, generator, 0.0, 2 * math.pi)
    height = _uniform(n, generator, -0.5, 0.5)
    side = torch.stack([radius * torch.cos(angle), radius * torch.sin(angle), height], dim=-1)
    return torch.where(on_side.unsqueeze(-1), side, points)


def _plane_pair(n: int, generator: torch.Generator, gap: float = 0.5) -> Tensor:
    xy = _uniform(2 * n, generator, -1.0, 1.0).reshape(n, 2)
    z = torch.where(_uniform(n, generator) < 0.5, gap, -gap).to(torch.float64)
    return torch.cat([xy, z.unsqueeze(-1)], dim=-1)


SHAPES: Dict[str, Sampler] = {
    "sphere": _sphere,
    "torus": _torus,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "ellipsoid": _ellipsoid,
    "capsule": _capsule,
    "plane_pair": _plane_pair,
}


def sample_shape(
    name: str, num_points: int, generator: torch.Generator, label: Optional[int] = None
) -> PointCloud:
    if name not in SHAPES:
        raise DatasetError(f"Unknown synthetic shape '{name}'", details={"known": sorted(SHAPES)})
    if num_points < 1:
        raise DatasetError("Synthetic clouds need at least one point", details={"N": num_points})
    points = SHAPES[name](num_points, generator)
    jitter = _uniform(3, generator, 0.8, 1.2)
    return PointCloud((points * jitter).to(torch.float32), label=label)


def write_fixture_set(
    root: Union[str, Path],
    num_points: int,
    per_class: int = 1,
    seed: int = 0,
    shapes: Optional[Sequence[str]] = None,
) -> List[Path]:
    """Write ``root/<shape>/<shape>_<i>.ply`` for every shape, labelled by shape order."""
    names = list(shapes) if shapes is not None else list(SHAPES)
    generator = torch.Generator().manual_seed(seed)
    root = Path(root)
    written: List[Path] = []
    for label, name in enumerate(names):
        for i in range(per_class):
            path = root / name / f"{name}_{i:03d}.ply"
            save_pointcloud(sample_shape(name, num_points, generator, label=label), path)
            written.append(path)
    logger.info("fixtures_written", root=str(root), clouds=len(written), points=num_points)
    return written
