"""Long-video description engine: segmentation, speaker linking, global name
decoding, description assembly and multiple-choice QA evaluation."""

__version__ = "0.1.0"

from storypipe.errors import (
    BackendError,
    ContractError,
    FixtureMissError,
    ParseError,
    ProtocolError,
    StorypipeError,
    ValidationError,
)

__all__ = [
    "__version__",
    "BackendError",
    "ContractError",
    "FixtureMissError",
    "ParseError",
    "ProtocolError",
    "StorypipeError",
    "ValidationError",
]
