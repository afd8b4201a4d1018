"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration or argument is invalid."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class StateError(RuntimeError):
    """An object was used before it reached the required state."""


class MissingArtifactError(StateError):
    """A pipeline stage needs an artifact produced by an earlier stage."""

    def __init__(self, path, stage):
        self.path = path
        self.stage = stage
        super().__init__(f"missing artifact {path}; run the '{stage}' stage first")
