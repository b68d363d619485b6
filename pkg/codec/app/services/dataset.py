"""PLY folder ingestion, the seeded 8:1:1 split and per-step batch sampling."""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import structlog
import torch
from torch import Tensor

from app.core.exceptions import DatasetError
from app.services.geometry import PointCloud, normalize
from app.services.ply import load_pointcloud

logger = structlog.get_logger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CloudRecord:
    path: Path
    label: Optional[int]


def discover(root: Union[str, Path]) -> Tuple[List[CloudRecord], List[str]]:
    """Every ``*.ply`` below ``root``; first-level subdirectories name the classes."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"Dataset directory not found: {root}", details={"root": str(root)})
    paths = sorted(p for p in root.rglob("*.ply") if p.is_file())
    nested = [p.relative_to(root).parts for p in paths]
    classes = sorted({parts[0] for parts in nested if len(parts) > 1})
    index = {name: i for i, name in enumerate(classes)}
    records = []
    for path in paths:
        parts = path.relative_to(root).parts
        records.append(CloudRecord(path=path, label=index[parts[0]] if len(parts) > 1 else None))
    return records, classes


def split_records(records: Sequence[CloudRecord], seed: int = 0) -> Dict[str, List[CloudRecord]]:
    """Seeded 8:1:1 split; validation and test each get ``n // 10`` records."""
    n = len(records)
    order = torch.randperm(n, generator=torch.Generator().manual_seed(seed)).tolist()
    n_val = n_test = n // 10
    n_train = n - n_val - n_test
    shuffled = [records[i] for i in order]
    return {
        "train": sorted(shuffled[:n_train], key=lambda r: r.path),
        "val": sorted(shuffled[n_train : n_train + n_val], key=lambda r: r.path),
        "test": sorted(shuffled[n_train + n_val :], key=lambda r: r.path),
    }


def subsample(points: Tensor, num_points: int, generator: torch.Generator) -> Tensor:
    """Uniform random choice of rows; with replacement only when the cloud is too small."""
    n = points.shape[0]
    if n >= num_points:
        idx = torch.randperm(n, generator=generator)[:num_points]
    else:
        idx = torch.randint(0, n, (num_points,), generator=generator)
    return points[idx]


def load_raw(
    root: Union[str, Path], split: str = "all", seed: int = 0
) -> List[Tuple[Path, PointCloud]]:
    """Clouds of one split in their original coordinates; directory labels win over PLY comments."""
    if split not in SPLITS + ("all",):
        raise DatasetError(f"Unknown split '{split}'", details={"split": split})
    records, _ = discover(root)
    if split != "all":
        records = split_records(records, seed)[split]
    if not records:
        raise DatasetError("Dataset is empty", details={"root": str(root), "split": split})
    clouds = []
    for record in records:
        pc = load_pointcloud(record.path)
        label = record.label if record.label is not None else pc.label
        clouds.append((record.path, PointCloud(pc.points, label=label)))
    return clouds


class PointCloudDataset:
    """Normalized clouds of one split, held in memory."""

    def __init__(self, root: Union[str, Path], split: str = "all", seed: int = 0) -> None:
        raw = load_raw(root, split, seed)
        self.classes = discover(root)[1]
        self.paths = [path for path, _ in raw]
        self.clouds: List[PointCloud] = [normalize(pc)[0] for _, pc in raw]
        logger.info(
            "dataset_loaded",
            root=str(root),
            split=split,
            clouds=len(self.clouds),
            classes=len(self.classes),
        )

    def __len__(self) -> int:
        return len(self.clouds)

    def __getitem__(self, index: int) -> PointCloud:
        return self.clouds[index]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def sample_batch(
        self, batch: int, num_points: int, generator: torch.Generator
    ) -> Tuple[Tensor, Optional[Tensor]]:
        """Draw ``batch`` clouds with replacement, each subsampled to ``num_points``."""
        picks = torch.randint(0, len(self.clouds), (batch,), generator=generator).tolist()
        points = torch.stack(
            [subsample(self.clouds[i].points, num_points, generator) for i in picks]
        )
        labels = [self.clouds[i].label for i in picks]
        if any(label is None for label in labels):
            return points, None
        return points, torch.tensor(labels, dtype=torch.long)


def write_split_lists(
    root: Union[str, Path], out_dir: Union[str, Path], seed: int = 0
) -> Dict[str, Path]:
    """Materialize the split as ``<split>.txt`` files of paths relative to ``root``."""
    root = Path(root)
    records, _ = discover(root)
    if not records:
        raise DatasetError("Dataset is empty", details={"root": str(root)})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = split_records(records, seed)
    written = {}
    for name, members in splits.items():
        path = out / f"{name}.txt"
        lines = [record.path.relative_to(root).as_posix() for record in members]
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        written[name] = path
    logger.info("split_written", out=str(out), **{name: len(m) for name, m in splits.items()})
    return written
