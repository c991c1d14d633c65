"""tractokit: hierarchical streamline representations and multi-embedding tract classification."""

from tractokit.errors import (
    CheckpointError,
    FormatError,
    InvalidInputError,
    NumericError,
    TractoError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "FormatError",
    "InvalidInputError",
    "NumericError",
    "TractoError",
    "__version__",
]
