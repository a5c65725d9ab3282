"""Exception hierarchy shared by every module.

Each error also derives from the closest builtin so callers can catch either.
"""


class BoundaryTransferError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(BoundaryTransferError, ValueError):
    pass


class SoftMaskError(BoundaryTransferError, ValueError):
    pass


class InvalidValueError(BoundaryTransferError, ValueError):
    pass


class DegenerateTransformError(BoundaryTransferError, ValueError):
    pass


class SideMismatchError(BoundaryTransferError, ValueError):
    pass


class CriticGradientError(BoundaryTransferError, RuntimeError):
    pass


class ConfigError(BoundaryTransferError, ValueError):
    pass


class CategoryError(BoundaryTransferError, ValueError):
    pass


class DatasetError(BoundaryTransferError, ValueError):
    pass


class DatasetLoadError(DatasetError):
    """Raised after ingestion when one or more manifest entries failed.

    Args:
        errors: One human-readable message per failed entry
    """

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        preview = "; ".join(self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{len(self.errors)} dataset entries failed: {preview}{more}")


class NumericalFailure(BoundaryTransferError, RuntimeError):
    """A training loss became non-finite.

    Args:
        step: Outer training step at which the failure happened
        phase: "critic", "generator" or "pretrain"
        values: The loss terms computed so far
    """

    def __init__(self, step: int, phase: str, values: dict[str, float]):
        self.step = step
        self.phase = phase
        self.values = dict(values)
        bad = {k: v for k, v in self.values.items() if v != v or v in (float("inf"), float("-inf"))}
        super().__init__(f"non-finite {phase} loss at step {step}: {bad or self.values}")


class CheckpointError(BoundaryTransferError, ValueError):
    """A checkpoint file is missing, unreadable or of an incompatible format version."""
