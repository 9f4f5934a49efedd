"""Exception and warning types shared across the package."""


class RangelocError(Exception):
    """Base class for all package-specific errors."""


class InvalidRotationError(RangelocError):
    """Matrix fails the rotation-matrix invariants (orthonormal, det +1)."""


class SingularGeometryError(RangelocError):
    """Robot translation coincides with an anchor; range gradient undefined."""


class GraphError(RangelocError):
    """Malformed factor graph (duplicate node, dangling edge, bad dimension)."""


class StreamError(RangelocError):
    """Measurement stream violates ordering or pairing requirements."""


class ConfigError(RangelocError):
    """Invalid or unknown configuration key/value."""


class InsufficientGeometryError(RangelocError):
    """Fewer than four non-coplanar anchors available."""


class ParseError(RangelocError):
    """Malformed record in an input file."""


class SamplingFailureError(RangelocError):
    """Feasible-set rejection sampling exceeded the failure-rate limit."""


class InsufficientGeometryWarning(UserWarning):
    """Anchor geometry in the current buffer is too weak for a 3-D fix."""


class SingularGeometryWarning(UserWarning):
    """A range factor was skipped for one iteration (robot at anchor)."""
