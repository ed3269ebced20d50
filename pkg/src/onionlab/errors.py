"""Error types shared by the library and the command line, each with its exit status."""
from __future__ import annotations

from .core.autodiff import NumericError
from .container import ContainerError
from .taskgen import GenerationExhausted


class MissingArtifact(FileNotFoundError):
    """A checkpoint or auxiliary file named on the command line does not exist."""


class ConfigMismatch(ValueError):
    """A checkpoint disagrees with the task or objective it is used with."""


class FreezeViolation(RuntimeError):
    """Base-model weights changed during auxiliary training."""


EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_MISMATCH = 4
EXIT_NUMERIC = 5
EXIT_EXHAUSTED = 6
EXIT_CORRUPT = 7

EXIT_CODES = {
    MissingArtifact: EXIT_MISSING,
    ConfigMismatch: EXIT_MISMATCH,
    FreezeViolation: EXIT_MISMATCH,
    NumericError: EXIT_NUMERIC,
    GenerationExhausted: EXIT_EXHAUSTED,
    ContainerError: EXIT_CORRUPT,
}


def exit_code(err: BaseException) -> int:
    for cls, code in EXIT_CODES.items():
        if isinstance(err, cls):
            return code
    return EXIT_OTHER


def error_record(err: BaseException) -> dict:
    return {"error": type(err).__name__, "message": str(err), "exit_code": exit_code(err)}
