"""Checkpoint files: ``[u32 manifest length][manifest JSON][little-endian float32 tensors]``."""
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import structlog
import torch
from pydantic import ValidationError

from app.core.config import ModelConfig, TrainConfig
from app.core.exceptions import CheckpointError, ModelMismatchError
from app.models.diffpcc import DiffusionPointCodec
from app.schemas.records import CheckpointManifest, TensorEntry

logger = structlog.get_logger(__name__)

FORMAT_VERSION = 1
LENGTH_FORMAT = "<I"
LENGTH_SIZE = struct.calcsize(LENGTH_FORMAT)


def save_checkpoint(
    model: DiffusionPointCodec,
    path: Union[str, Path],
    train_config: Optional[TrainConfig] = None,
    step: int = 0,
) -> Path:
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        blob = tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        entries.append(
            TensorEntry(name=name, shape=list(tensor.shape), offset=offset, nbytes=len(blob))
        )
        blobs.append(blob)
        offset += len(blob)

    manifest = CheckpointManifest(
        format_version=FORMAT_VERSION,
        model=model.config,
        train_config=train_config,
        step=step,
        tensors=entries,
    )
    header = manifest.model_dump_json(by_alias=True).encode("utf-8")

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(struct.pack(LENGTH_FORMAT, len(header)) + header + b"".join(blobs))
    logger.info("checkpoint_saved", path=str(target), step=step, tensors=len(entries))
    return target


def read_manifest(data: bytes) -> Tuple[CheckpointManifest, int]:
    """Parse the manifest; returns it with the offset where tensor data starts."""
    if len(data) < LENGTH_SIZE:
        raise CheckpointError("Checkpoint is truncated")
    (length,) = struct.unpack_from(LENGTH_FORMAT, data, 0)
    if LENGTH_SIZE + length > len(data):
        raise CheckpointError("Checkpoint manifest overruns the file", details={"length": length})
    try:
        manifest = CheckpointManifest.model_validate_json(data[LENGTH_SIZE : LENGTH_SIZE + length])
    except ValidationError as exc:
        raise CheckpointError("Invalid checkpoint manifest", details={"errors": str(exc)})
    if manifest.format_version != FORMAT_VERSION:
        raise CheckpointError(
            "Unsupported checkpoint format version",
            details={"version": manifest.format_version, "supported": FORMAT_VERSION},
        )
    return manifest, LENGTH_SIZE + length


def load_checkpoint(
    path: Union[str, Path], expected: Optional[ModelConfig] = None
) -> Tuple[DiffusionPointCodec, CheckpointManifest]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}", details={"path": str(path)})

    manifest, base = read_manifest(data)
    if expected is not None and expected != manifest.model:
        raise ModelMismatchError(
            "Checkpoint was trained with a different model configuration",
            details={"checkpoint": manifest.model.model_dump(), "expected": expected.model_dump()},
        )

    model = DiffusionPointCodec(manifest.model)
    state = model.state_dict()
    stored = {entry.name: entry for entry in manifest.tensors}
    if set(stored) != set(state):
        raise CheckpointError(
            "Checkpoint tensors do not match the model",
            details={
                "missing": sorted(set(state) - set(stored)),
                "unexpected": sorted(set(stored) - set(state)),
            },
        )

    loaded = {}
    for name, target in state.items():
        entry = stored[name]
        if list(target.shape) != entry.shape:
            raise CheckpointError(
                f"Shape mismatch for tensor '{name}'",
                details={"checkpoint": entry.shape, "model": list(target.shape)},
            )
        count = int(np.prod(entry.shape, dtype=np.int64))
        if entry.nbytes != 4 * count or base + entry.offset + entry.nbytes > len(data):
            raise CheckpointError(
                f"Tensor '{name}' overruns the checkpoint", details={"name": name}
            )
        array = np.frombuffer(data, dtype="<f4", count=count, offset=base + entry.offset)
        loaded[name] = torch.from_numpy(array.astype(np.float32).reshape(entry.shape))
    model.load_state_dict(loaded)
    logger.debug("checkpoint_loaded", path=str(path), step=manifest.step)
    return model, manifest
