from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.config import ModelConfig, TrainConfig


class ContainerHeader(BaseModel):
    """Fixed fields of a ``.dpcc`` file."""

    model_config = ConfigDict(frozen=True)

    N: int = Field(..., ge=1, le=2**32 - 1)
    S: int = Field(..., ge=0, le=2**16 - 1)
    C: int = Field(..., ge=0, le=2**16 - 1)
    C_z: int = Field(..., ge=0, le=2**16 - 1)
    T: int = Field(..., ge=1, le=2**16 - 1)
    seed: int = Field(default=0, ge=0, le=2**64 - 1)
    label: int = Field(default=-1, ge=-1, le=2**15 - 1)
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = Field(default=1.0, gt=0)

    @property
    def label_or_none(self) -> Optional[int]:
        return None if self.label < 0 else self.label


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int = Field(..., ge=0)
    nbytes: int = Field(..., ge=0)


class CheckpointManifest(BaseModel):
    format_version: int
    model: ModelConfig
    train_config: Optional[TrainConfig] = None
    step: int = Field(default=0, ge=0)
    tensors: List[TensorEntry] = Field(default_factory=list)


class TrainRecord(BaseModel):
    """One line of ``metrics.jsonl``."""

    step: int
    loss: float
    d_mse: float
    d_cd: float
    bpp_est: float
    lr: float


class EncodeSummary(BaseModel):
    N: int
    bytes: int
    bpp: float
    stream_bits: Dict[str, int]
    clamped: int = 0


class RdRow(BaseModel):
    """One row of the RD report; column order is the CSV order."""

    lambda_: float = Field(..., alias="lambda")
    bpp: float = Field(..., gt=0)
    psnr_d1: float
    chamfer: float

    model_config = ConfigDict(populate_by_name=True)


class CloudEvalRecord(BaseModel):
    lambda_: float = Field(..., alias="lambda")
    path: str
    N: int
    bpp: float
    psnr_d1: float
    chamfer: float
    encode_seconds: float
    decode_seconds: float

    model_config = ConfigDict(populate_by_name=True)

    @field_validator("bpp")
    @classmethod
    def validate_bpp(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("bpp must be positive")
        return v
