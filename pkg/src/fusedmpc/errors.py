"""Exception types shared across the solver stack."""


class ConfigError(ValueError):
    """Bad configuration: dimension mismatches, invalid settings, malformed files."""


class NumericError(RuntimeError):
    """Numerical failure (non-finite input, loss of positive definiteness).

    ``stage`` identifies the offending horizon index when known.
    """

    def __init__(self, message, stage=None):
        if stage is not None:
            message = f"{message} (stage t={stage})"
        super().__init__(message)
        self.stage = stage


class DivergenceError(NumericError):
    """A rollout produced a non-finite state. ``stage`` is the failing timestep."""
