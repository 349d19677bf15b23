"""Exception types raised across the package."""


class MuseError(Exception):
    """Base class for package errors."""


class InvalidStateError(MuseError, RuntimeError):
    """An object was used out of order, e.g. a stale forward cache."""


class TrainingDivergedError(MuseError, RuntimeError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class CorruptCheckpointError(MuseError, ValueError):
    """A checkpoint file could not be decoded."""


class SolverStalledError(MuseError, RuntimeError):
    """Conjugate gradients failed to reach the requested residual."""


class StageDivergedError(MuseError, RuntimeError):
    """A multi-scale solve stage produced a non-finite objective."""

    def __init__(self, stage, message=""):
        super().__init__(f"stage {stage} diverged" + (f": {message}" if message else ""))
        self.stage = stage


class ConfigError(MuseError, ValueError):
    """An experiment config is malformed; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class GoldenSuiteError(MuseError, RuntimeError):
    """A golden case file is missing or unreadable."""
