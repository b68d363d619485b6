from functools import lru_cache
from pathlib import Path
from typing import Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from app.core.exceptions import ConfigError


class CompressorConfig(BaseModel):
    """Widths of the dual-space compressor."""

    model_config = ConfigDict(frozen=True)

    C: int = Field(default=288, ge=6)
    C_z: int = Field(default=96, ge=1)
    S: int = Field(default=64, ge=1)
    k_enc: int = Field(default=16, ge=1)
    use_shape_latent: bool = True
    use_detail_latent: bool = True

    @field_validator("C")
    @classmethod
    def validate_width(cls, v: int) -> int:
        if v % 6 != 0:
            raise ValueError("C must be a multiple of 6")
        return v

    @model_validator(mode="after")
    def validate_branches(self) -> "CompressorConfig":
        if not (self.use_shape_latent or self.use_detail_latent):
            raise ValueError("at least one latent branch must be enabled")
        return self


class DenoiserConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    C: int = Field(default=288, ge=6)
    S: int = Field(default=64, ge=1)
    k: int = Field(default=8, ge=1)
    heads: int = Field(default=4, ge=1)
    label_vocab: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def validate_heads(self) -> "DenoiserConfig":
        if self.C % 6 != 0:
            raise ValueError("C must be a multiple of 6")
        if self.C % self.heads != 0:
            raise ValueError("C must be divisible by heads")
        return self


class ModelConfig(BaseModel):
    """Everything needed to rebuild a codec model; stored in checkpoints."""

    model_config = ConfigDict(frozen=True)

    compressor: CompressorConfig = Field(default_factory=CompressorConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    T: int = Field(default=200, ge=1)
    cosine_offset: float = Field(default=0.008, gt=0)

    @model_validator(mode="after")
    def validate_shared_widths(self) -> "ModelConfig":
        if self.compressor.C != self.denoiser.C or self.compressor.S != self.denoiser.S:
            raise ValueError("compressor and denoiser must share C and S")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lambda_: float = Field(default=1.0, ge=0, alias="lambda")
    gamma: float = Field(default=1.0, ge=0)
    steps: int = Field(default=80000, ge=0)
    batch: int = Field(default=48, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    lr_decay: float = Field(default=0.5, gt=0, lt=1)
    lr_decay_every: int = Field(default=30000, ge=1)
    adam_beta1: float = Field(default=0.9, gt=0, lt=1)
    adam_beta2: float = Field(default=0.999, gt=0, lt=1)
    T: int = Field(default=200, ge=1)
    points_per_cloud: int = Field(default=2048, ge=1)
    use_chamfer: bool = True
    clip_denoised: bool = True
    log_every: int = Field(default=100, ge=1)
    checkpoint_every: int = Field(default=10000, ge=1)
    data_split: str = Field(default="all", pattern="^(all|train|val|test)$")

    @property
    def chamfer_weight(self) -> float:
        return self.gamma if self.use_chamfer else 0.0


LAMBDA_GRID: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0, 4.0)


class Settings(BaseSettings):
    """Flat view over every typed key accepted in a config file.

    Values only come from explicit init kwargs (usually a parsed config
    file); environment variables and dotenv files are never consulted.
    """

    model_config = SettingsConfigDict(extra="forbid", populate_by_name=True, case_sensitive=True)

    # Compressor / denoiser
    C: int = 288
    C_z: int = 96
    S: int = 64
    k_enc: int = 16
    k: int = 8
    heads: int = 4
    label_vocab: int = 0
    T: int = 200
    cosine_offset: float = 0.008
    use_shape_latent: bool = True
    use_detail_latent: bool = True

    # Training
    lambda_: float = Field(default=1.0, alias="lambda")
    gamma: float = 1.0
    steps: int = 80000
    batch: int = 48
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 30000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    points_per_cloud: int = 2048
    use_chamfer: bool = True
    clip_denoised: bool = True
    log_every: int = 100
    checkpoint_every: int = 10000
    data_split: str = "all"

    # Runtime
    seed: int = Field(default=0, ge=0)
    device: str = "cpu"
    psnr_peak: float = Field(default=1.0, gt=0)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls,
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)

    def codec_model(self) -> ModelConfig:
        try:
            return ModelConfig(
                compressor=CompressorConfig(
                    C=self.C,
                    C_z=self.C_z,
                    S=self.S,
                    k_enc=self.k_enc,
                    use_shape_latent=self.use_shape_latent,
                    use_detail_latent=self.use_detail_latent,
                ),
                denoiser=DenoiserConfig(
                    C=self.C, S=self.S, k=self.k, heads=self.heads, label_vocab=self.label_vocab
                ),
                T=self.T,
                cosine_offset=self.cosine_offset,
            )
        except ValidationError as exc:
            raise ConfigError("Invalid model configuration", details={"errors": _errors(exc)})

    def training(self) -> TrainConfig:
        names = [name for name in TrainConfig.model_fields if name != "lambda_"]
        fields = {name: getattr(self, name) for name in names}
        try:
            return TrainConfig(lambda_=self.lambda_, **fields)
        except ValidationError as exc:
            raise ConfigError("Invalid training configuration", details={"errors": _errors(exc)})


def _errors(exc: ValidationError) -> list:
    return [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]


def parse_key_value_file(path: Path) -> Dict[str, str]:
    values: Dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {path}: {exc}")

    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"Expected 'key = value' in {path}", details={"line": lineno, "text": raw}
            )
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"Empty key in {path}", details={"line": lineno})
        if key in values:
            raise ConfigError(f"Duplicate key '{key}' in {path}", details={"line": lineno})
        values[key] = value
    return values


@lru_cache
def get_settings(config_path: Optional[str] = None) -> Settings:
    values = parse_key_value_file(Path(config_path)) if config_path else {}
    try:
        return Settings(**values)
    except ValidationError as exc:
        raise ConfigError("Invalid configuration", details={"errors": _errors(exc)})
