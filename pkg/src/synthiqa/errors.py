"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class ConfigurationError(ValueError):
    """Raised for unknown options, unknown distortion kinds and bad config files."""


class AgentLookupError(KeyError):
    """An external agent was asked about an image it has no score for."""

    def __init__(self, path):
        super().__init__(path)
        self.path = path

    def __str__(self):
        return f"no score recorded for image {self.path!r}"


class PairSamplingError(RuntimeError):
    """A pair type could not be satisfied from the manifest."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupted or was written by an incompatible version."""


class TrainingDivergedError(RuntimeError):
    """A non-finite loss was produced during optimization."""
