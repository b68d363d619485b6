from typing import Any, Dict, Optional


class CodecError(Exception):
    exit_code: int = 1

    def __init__(
        self,
        message: str,
        exit_code: Optional[int] = None,
        details: Optional[Dict[str, Any]] = None,
    ) -> None:
        super().__init__(message)
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code
        self.details = details or {}


class ConfigError(CodecError):
    exit_code = 2


class GeometryError(CodecError):
    exit_code = 3


class PlyFormatError(GeometryError):
    pass


class DatasetError(CodecError):
    exit_code = 3


class ScheduleError(CodecError):
    exit_code = 4


class NumericalError(CodecError):
    exit_code = 5


class EntropyCodingError(CodecError):
    exit_code = 6


class RangeCoderError(EntropyCodingError):
    pass


class ContainerError(EntropyCodingError):
    pass


class CheckpointError(CodecError):
    exit_code = 7


class ModelMismatchError(CheckpointError):
    pass


class EvaluationError(CodecError):
    exit_code = 8


class ShapeMismatchError(CodecError):
    exit_code = 5
