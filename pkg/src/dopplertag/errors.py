"""Exception hierarchy shared by the library and the CLI."""


class DopplerTagError(Exception):
    """Base class for all package errors."""


class DomainError(DopplerTagError, ValueError):
    """An argument lies outside the domain of a closed-form relation."""


class InconsistentMeasurement(DopplerTagError, ValueError):
    """A frequency shift is too large for the claimed sender speed."""


class NoSolution(DopplerTagError, ValueError):
    """No angle in (0, pi) satisfies the resolution requirement."""


class DegenerateGeometry(DopplerTagError, ValueError):
    """Two bearing lines are (nearly) parallel or meet behind a sender."""


class SceneError(DopplerTagError, ValueError):
    """A scene or configuration document violates its schema."""

    def __init__(self, field, reason):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class ConfigError(DopplerTagError, ValueError):
    """A sweep plan or session configuration is inconsistent."""


class SimulationError(DopplerTagError, RuntimeError):
    """Rendering failed (e.g. receiver coincides with the speaker)."""


class ToneNotDetected(DopplerTagError, RuntimeError):
    """No frame of a recording carries the probe tone."""


class SessionError(DopplerTagError, RuntimeError):
    """The reply transport failed during a tagging session."""
