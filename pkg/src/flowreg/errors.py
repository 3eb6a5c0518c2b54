"""Exception types shared across the toolkit."""


class FlowregError(Exception):
    """Base class for all errors raised by flowreg."""


class EmptyGeometry(FlowregError):
    """An operation received a mesh or point cloud with no points."""


class DegenerateExtent(FlowregError):
    """A spatial extent required by an operation collapses to zero."""


class InsufficientPoints(FlowregError):
    """Too few points for the requested statistic."""


class InvalidArgument(FlowregError):
    """Argument outside the operation's documented domain."""


class NonFiniteInput(FlowregError):
    """Input contains NaN or infinite coordinates."""


class DivergedFlow(FlowregError):
    """ODE trajectory or training loss became non-finite."""


class DegenerateGuidance(FlowregError):
    """A guidance frame collapsed below the usable minimum during preprocessing."""


class UnreachableLandmark(FlowregError):
    """A landmark lies in a mesh component unreachable from its counterpart."""


class ParseError(FlowregError):
    """Malformed geometry file.

    Carries the offending path and, when known, the 1-based line number.
    """

    def __init__(self, message, path=None, line=None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if line is not None:
            detail = f"{detail} (line {line})"
        super().__init__(detail)
        self.path = path
        self.line = line
