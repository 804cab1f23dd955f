"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class QLBEError(Exception):
    """Base class for every error raised by this package."""


class DegenerateDirectionError(QLBEError, ValueError):
    """A direction was requested from a zero vector (e.g. decomposition along Q=0)."""


class NonFiniteMomentumError(QLBEError, ValueError):
    pass


class OffShellError(QLBEError, ValueError):
    """Amplitude requested for a momentum pair violating |p_out| = |p_in|."""


class QuadratureError(QLBEError, ArithmeticError):
    """A quadrature did not reach its tolerance.

    ``estimate`` and ``error_bound`` carry the achieved value and its error bound.
    """

    def __init__(self, message: str, estimate: float, error_bound: float):
        super().__init__(f"{message} (estimate={estimate!r}, error bound={error_bound!r})")
        self.estimate = estimate
        self.error_bound = error_bound


class TruncationError(QLBEError, ArithmeticError):
    def __init__(self, message: str, estimate: float, error_bound: float):
        super().__init__(f"{message} (estimate={estimate!r}, truncation={error_bound!r})")
        self.estimate = estimate
        self.error_bound = error_bound


class GridMismatchError(QLBEError, ValueError):
    pass


class StabilityError(QLBEError, ValueError):
    """Requested time step exceeds the explicit stability bound."""

    def __init__(self, dt: float, dt_max: float):
        super().__init__(f"dt={dt!r} exceeds stability bound dt_max={dt_max!r}")
        self.dt = dt
        self.dt_max = dt_max


class ContainerError(QLBEError, ValueError):
    """Malformed, corrupted or inconsistent binary container."""


class MonitorViolation(QLBEError, RuntimeError):
    """A run monitor left its tolerance band.  ``diagnostic`` is a JSON-able dict."""

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class MajorantViolation(QLBEError, RuntimeError):
    """A null-collision acceptance ratio exceeded one."""


class ConfigError(QLBEError, ValueError):
    pass
