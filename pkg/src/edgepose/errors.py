"""Exception hierarchy shared by all edgepose modules."""


class EdgePoseError(Exception):
    """Base class for all errors raised by edgepose."""


class GeometryError(EdgePoseError):
    pass


class DegenerateProjection(GeometryError):
    """Point lies on the principal plane of the camera (w ~ 0)."""


class InsufficientViews(GeometryError):
    pass


class DegenerateGeometry(GeometryError):
    """Null space of the DLT system is not one-dimensional."""


class HomogeneousDivide(GeometryError):
    pass


class CholeskyFailure(GeometryError):
    pass


class MapFailure(GeometryError):
    """The mapped function failed on at least one sigma point."""


class GainDomain(EdgePoseError, ValueError):
    """Fusion gains violate alpha >= 0, beta >= 0, alpha + beta < 1."""


class EmptyGraph(EdgePoseError):
    pass


class NonMonotoneTimestamp(EdgePoseError):
    pass


class SchemaViolation(EdgePoseError):
    """Malformed wire record: bad JSON, unknown or missing fields, wrong types."""


class InvariantViolation(EdgePoseError):
    """Well-formed record whose values break a type invariant."""


class Disconnected(EdgePoseError):
    pass


class ConfigError(EdgePoseError):
    pass


class NoValidJoints(EdgePoseError):
    pass
