"""Exception types shared across the package.

Every failure mode callers are expected to handle gets its own class so
that tests and the CLI can distinguish usage problems (bad configuration,
bad shapes) from runtime failures (diverged training, corrupt files).
"""


class ColorshotError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(ColorshotError):
    """Invalid or inconsistent configuration values."""


class ShapeError(ColorshotError):
    """An array or tensor does not have the contracted shape."""


class IngestionError(ColorshotError):
    """A dataset directory or image file could not be ingested."""


class SamplingError(ColorshotError):
    """An episode cannot be drawn from the given dataset."""


class NumericError(ColorshotError):
    """A numeric invariant was violated (non-finite values, zero row sums)."""


class TrainingDivergedError(ColorshotError):
    """Training aborted on a non-finite loss.

    Carries the iteration index and the per-component loss breakdown so the
    failure can be diagnosed from the exception alone.
    """

    def __init__(self, iteration: int, components: dict):
        self.iteration = iteration
        self.components = components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at iteration {iteration} ({parts})")


class CheckpointError(ColorshotError):
    """A checkpoint file is missing, corrupt, or incompatible."""
