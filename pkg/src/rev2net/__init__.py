"""Video action recognition with flow-prediction and reversed-frame decoders trained jointly."""

from .errors import (ConfigError, DataError, FormatError, InvalidAxisError, InvalidInputError,
                     InvalidShapeError, NoTapeError, Rev2NetError)
from .model import Rev2NetConfig, build, export_inference, forward_infer, forward_train
from .tensor import Tape, Tensor, backward

__all__ = [
    "ConfigError", "DataError", "FormatError", "InvalidAxisError", "InvalidInputError", "InvalidShapeError",
    "NoTapeError", "Rev2NetError", "Rev2NetConfig", "Tape", "Tensor", "backward", "build",
    "export_inference", "forward_infer", "forward_train",
]
