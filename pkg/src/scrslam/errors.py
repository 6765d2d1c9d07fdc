"""Exception hierarchy shared across the package."""


class ScrSlamError(Exception):
    """Base class for all scrslam errors."""


class InvalidObservationError(ScrSlamError):
    """Observation with non-positive or non-finite depth."""


class BehindCameraError(ScrSlamError):
    """Attempted to project a point with z <= 0."""


class InsufficientPointsError(ScrSlamError):
    """Fewer point correspondences than the solver needs."""


class DegenerateConfigurationError(ScrSlamError):
    """Point set is (near-)collinear or coincident; alignment is rank-deficient."""


class EmptyAssociationError(ScrSlamError):
    """No timestamp pairs could be associated between two trajectories."""


class SerializationError(ScrSlamError):
    """Bad magic, unsupported version, or truncated byte stream."""


class BootstrapFailureError(ScrSlamError):
    """Map bootstrap did not converge within its cycle budget."""
