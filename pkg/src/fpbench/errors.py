"""Exception types shared across the package."""


class FpbenchError(Exception):
    """Base class for all package-specific errors."""


class InputError(FpbenchError, ValueError):
    """Rejected input: shape mismatch, invalid parameter, degenerate data."""


class ConfigError(InputError):
    """Benchmark configuration failed to parse or validate."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class SingularSystemError(FpbenchError, RuntimeError):
    """The bordered extrapolation system is numerically singular."""

    def __init__(self, message="singular bordered system", step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class DivergenceError(FpbenchError, RuntimeError):
    """Non-finite state encountered, or an iteration failed to converge."""

    def __init__(self, message="iteration diverged", iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class NotReachedError(FpbenchError, RuntimeError):
    """A trace never reached the requested residual tolerance."""

    def __init__(self, label, tol):
        super().__init__(f"trace {label!r} never reached residual {tol:g}")
        self.label = label
        self.tol = tol
