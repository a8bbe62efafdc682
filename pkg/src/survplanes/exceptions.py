"""Exception types raised across the package."""


class DegenerateDistributionError(ValueError):
    """Raised when a fit needs spread in its input but all values coincide."""


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. an empty class)."""


class SamplingError(RuntimeError):
    """Raised when no training pair satisfies the sampling constraints."""


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite during training."""

    def __init__(self, step, message="non-finite value"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""
