"""Exception hierarchy shared by every crowdmap module."""


class CrowdmapError(Exception):
    pass


class InputDomainError(CrowdmapError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class DegenerateGeometryError(CrowdmapError, ValueError):
    """Geometry too ill-conditioned to produce a defined answer."""


class InsufficientDataError(CrowdmapError, ValueError):
    pass


class NotVisibleError(CrowdmapError):
    """Landmark is behind the camera or outside its field of view."""


class ConvergenceError(CrowdmapError):
    """Iterative solver hit its iteration cap.

    The last iterate is kept on ``last_iterate`` for diagnostics.
    """

    def __init__(self, message, last_iterate=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class ConfigError(CrowdmapError, ValueError):
    pass


class RecordParseError(CrowdmapError, ValueError):
    """A serialized observation or message could not be decoded."""


class ServiceError(CrowdmapError):
    """The map service answered a request with an error."""
