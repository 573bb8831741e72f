"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config problems exit 2, data-format
problems exit 3, verification mismatches exit 4.
"""


class CsbError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CsbError):
    """Dimension or block-alignment mismatch."""


class FormatError(CsbError):
    """Malformed CSB data: broken invariants or a corrupt byte stream."""


class BadMagicError(FormatError):
    """Byte stream does not start with the CSB1 magic."""


class TruncatedStreamError(FormatError):
    """Byte stream ends before the declared payload."""


class ConfigError(CsbError):
    """Invalid run configuration."""


class TrainingDivergedError(CsbError):
    """SGD loss became non-finite."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class InfeasibleTargetError(CsbError):
    """The loss target cannot be met (baseline too weak, or search exhausted)."""


class LinkError(CsbError):
    """A program references a weight or bias slot that was never bound."""


class ProgramMismatchError(CsbError):
    """A compiled program does not match the matrix it is executed against."""


class VerifyMismatchError(CsbError):
    """Simulated output disagrees with the reference computation."""
