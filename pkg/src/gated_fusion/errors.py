"""Exception hierarchy for gated_fusion.

Each class also derives from the builtin exception callers would naturally
catch, so ``except ValueError`` keeps working for validation failures.
"""

from __future__ import annotations


class GatedFusionError(Exception):
    exit_code = 1


class ValidationError(GatedFusionError, ValueError):
    exit_code = 1


class DimensionError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class IncompatibleVersionError(ValidationError):
    def __init__(self, path: object, found: int, expected: int) -> None:
        super().__init__(
            f"{path}: incompatible format_version {found} (this build reads version {expected})"
        )
        self.found = found
        self.expected = expected


class ArtifactIOError(GatedFusionError, OSError):
    exit_code = 2


class ChecksumError(ArtifactIOError):
    pass


class DivergenceError(GatedFusionError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, epoch: int | None = None, last_finite_loss: float | None = None) -> None:
        detail = message
        if epoch is not None:
            detail += f" (epoch {epoch}"
            if last_finite_loss is not None:
                detail += f", last finite loss {last_finite_loss:.6f}"
            detail += ")"
        super().__init__(detail)
        self.epoch = epoch
        self.last_finite_loss = last_finite_loss


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(exc, GatedFusionError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 2
    if isinstance(exc, ArithmeticError):
        return 3
    return 1
