"""Exception types raised across the simulator.

Grouped here so callers (CLI, experiment harness) can catch per-failure-mode
without importing every module.
"""


class SimError(Exception):
    """Base class for all endosim errors."""


# -- environment / cloud files ------------------------------------------------

class CloudFormatError(SimError, ValueError):
    """A cloud file row could not be parsed or contains NaN/Inf."""


class EmptyCloudError(SimError, ValueError):
    """A cloud file parsed to zero points."""


class DegenerateGeometryError(SimError, ValueError):
    """Collinear landmarks or otherwise degenerate geometric input."""


# -- planning -----------------------------------------------------------------

class InfeasibleEndpointError(SimError, ValueError):
    """Planner start or target is in collision or off the working plane."""


class NoPathFoundError(SimError, RuntimeError):
    """Planner iteration budget exhausted; retryable with a different seed."""


# -- registration --------------------------------------------------------------

class MarkerCountError(SimError, ValueError):
    """Fewer than three markers supplied."""


class MarkerLabelError(SimError, ValueError):
    """Marker labels of the two sets do not correspond."""


# -- imaging -------------------------------------------------------------------

class EmptyFrameError(SimError, RuntimeError):
    """Every rendered body point projected outside the image."""


class NoSkeletonError(SimError, RuntimeError):
    """Tip search on an empty skeleton."""


class NoEndpointError(SimError, RuntimeError):
    """Skeleton has no endpoint pixels (closed loop)."""


class DegenerateViewError(SimError, RuntimeError):
    """Projection restricted to the working plane is not invertible."""


# -- control -------------------------------------------------------------------

class InfeasibleLimitsError(SimError, RuntimeError):
    """Joint-limit box is empty at the current configuration."""


class ControlTimeoutError(SimError, RuntimeError):
    """Per-waypoint step budget exhausted; carries the partial log."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class ImagingAbortError(SimError, RuntimeError):
    """Closed loop aborted because the imaging pipeline failed; carries the
    offending frame and the partial log for post-mortem dumps."""

    def __init__(self, message, frame=None, log=None):
        super().__init__(message)
        self.frame = frame
        self.log = log
