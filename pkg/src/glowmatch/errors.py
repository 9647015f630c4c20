"""Exception hierarchy shared across the package.

Exit-code mapping for the command-line tool lives in ``cli``; library code
only distinguishes bad caller input from internal contract breakage and
runtime failures.
"""


class GlowError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(GlowError):
    """An internal precondition was broken (e.g. shape mismatch)."""


class InvalidInput(GlowError):
    """Caller-supplied data is unusable (bad dimensions, singular H, ...)."""


class FileFormatError(InvalidInput):
    """A file failed to parse; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateGeometry(GlowError):
    """A geometric solver received a rank-deficient configuration."""


class GenerationError(GlowError):
    """Synthetic data generation exhausted its rejection-sampling budget."""


class TrainingDiverged(GlowError):
    """Training hit a non-finite loss; a diagnostic checkpoint was written."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
