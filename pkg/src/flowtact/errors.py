"""Exception types shared across the package.

Invalid arguments (shape mismatches, bad preconditions) raise plain
``ValueError``; these classes cover the remaining failure modes.
"""


class ConfigError(ValueError):
    """A configuration value is unusable (bad key, bad step count, bad kind)."""


class OutOfDomainError(ValueError):
    """A chart position falls outside the sensor chart."""


class ExpertFailure(RuntimeError):
    """The scripted expert cannot reach its target; the trajectory is discarded."""


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite."""
