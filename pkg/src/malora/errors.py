"""Exception taxonomy shared by every module."""


class MaloraError(Exception):
    """Base class; CLI maps these to exit code 1 (or 2 for config errors)."""


class ShapeError(MaloraError):
    """Non-conformable operands. Message names both shapes."""


class InvalidInput(MaloraError):
    """Non-finite or otherwise malformed numeric input."""


class RankDeficient(MaloraError):
    """Input lost full row rank; carries the numerical rank found."""

    def __init__(self, message: str, rank: int):
        super().__init__(message)
        self.rank = rank


class ConfigError(MaloraError):
    """Bad configuration value or file. CLI exit code 2."""


class NotScalarLoss(MaloraError):
    """backward() called on a node that is not 1x1."""


class DivergedError(MaloraError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class FormatError(MaloraError):
    """Corrupt or truncated checkpoint; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class SchemaError(MaloraError):
    """Checkpoint tensor table inconsistent with its config echo."""


class UnsupportedMethod(MaloraError):
    """Operation requires a MoE checkpoint but got a single-expert one."""
