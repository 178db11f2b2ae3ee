"""Exception types raised across the package."""


class StainPoolError(Exception):
    """Base class for all package errors."""


class ShapeError(StainPoolError, ValueError):
    pass


class DomainError(StainPoolError, ValueError):
    """A value left the domain of an operation (log of non-positive, non-finite result)."""


class GraphError(StainPoolError, ValueError):
    pass


class ConfigError(StainPoolError, ValueError):
    pass


class TrainingError(StainPoolError, RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


class FormatError(StainPoolError, ValueError):
    """Malformed manifest, feature file, checkpoint or cache file."""
