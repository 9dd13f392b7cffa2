"""Exception hierarchy for the alignment toolkit.

Three failure classes matter to callers (and map to CLI exit codes):
configuration, data ingestion, and numerical failures inside the filters
or mechanization.
"""


class ToolkitError(Exception):
    """Base class for all btalign errors."""


class ConfigError(ToolkitError):
    """Invalid or inconsistent configuration input."""


class IngestionError(ToolkitError):
    """Malformed or unreadable input data (CSV, scenario files...)."""


class NumericalError(ToolkitError):
    """Numerical failure during mechanization or filtering."""


class PolarSingularity(NumericalError):
    """Transport rate undefined: latitude too close to a pole."""


class NotNearOrthogonal(NumericalError):
    """Matrix too far from the orthogonal group to renormalize."""


class GimbalSingularity(NumericalError):
    """Euler-angle rate matrix not invertible (|cos(alpha_x)| ~ 0)."""


class CholeskyFailure(NumericalError):
    """Covariance not decomposable even after jitter repair."""


class SingularInnovation(NumericalError):
    """Innovation covariance not invertible in the measurement update."""


class EmptyRecord(IngestionError):
    """Operation requires a non-empty sensor record."""


class TimeAlignmentError(IngestionError):
    """GNSS epochs do not line up with the IMU record span."""


class InconsistentScenario(ConfigError):
    """Scenario segments imply a discontinuous or impossible trajectory."""
