"""Exception hierarchy shared by the package."""


class RecrouteError(Exception):
    """Base class for all package errors."""


class NetworkError(RecrouteError, ValueError):
    """Malformed or inconsistent network input."""


class NetworkFormatError(NetworkError):
    """A row of a network file could not be parsed."""


class TopologyError(NetworkError):
    """A link or pair references an unknown node or link."""


class DimensionError(NetworkError):
    """Attribute vectors have inconsistent length."""


class IsolatedDestinationError(NetworkError):
    """The destination node has no incoming link."""


class ValueFunctionError(RecrouteError, ArithmeticError):
    """The value-function system has no positive solution at these parameters."""


class InfeasibleParameters(RecrouteError, ArithmeticError):
    """The log-likelihood is -inf at the requested parameter point."""


class ObservationError(RecrouteError, ValueError):
    """A trip is inconsistent with the network or the requested estimator."""


class EnumerationOverflow(RecrouteError):
    """Path enumeration exceeded its budget."""


class UnsampleablePair(RecrouteError):
    """No connecting path could be sampled for an unconnected pair."""
