"""Exception types raised across the package."""


class GridShieldError(Exception):
    """Base class for all package errors."""


# case and profile parsing
class MalformedCase(GridShieldError, ValueError):
    pass


class MissingSlack(MalformedCase):
    pass


class DanglingReference(MalformedCase):
    pass


class DuplicateBusId(MalformedCase):
    pass


class MalformedCSV(GridShieldError, ValueError):
    pass


class UnknownZone(GridShieldError, KeyError):
    pass


class NonUniformSpacing(GridShieldError, ValueError):
    pass


class NonPositiveLoad(GridShieldError, ValueError):
    pass


class BadResolution(GridShieldError, ValueError):
    pass


# graph construction
class SingularBranch(GridShieldError, ValueError):
    pass


class DisconnectedGraph(GridShieldError, ValueError):
    pass


class ZeroDegree(GridShieldError, ValueError):
    pass


class InvalidRoot(GridShieldError, ValueError):
    pass


# numerical solvers
class NonConvergence(GridShieldError, RuntimeError):
    pass


class SingularJacobian(GridShieldError, RuntimeError):
    pass


class RankDeficient(GridShieldError, RuntimeError):
    pass


class DegenerateCovariance(GridShieldError, RuntimeError):
    pass


# attacks and datasets
class RegionExhausted(GridShieldError, RuntimeError):
    pass


class InsufficientHistory(GridShieldError, ValueError):
    pass


class DegenerateStats(GridShieldError, ValueError):
    pass


class InfeasibleAttack(GridShieldError, RuntimeError):
    pass


class TooFewSamples(GridShieldError, ValueError):
    pass


class InsufficientTimesteps(GridShieldError, ValueError):
    pass


class SchemaMismatch(GridShieldError, ValueError):
    pass


class ChecksumMismatch(GridShieldError, ValueError):
    pass


# tensors and models
class ShapeMismatch(GridShieldError, ValueError):
    pass


class IndexOutOfRange(GridShieldError, IndexError):
    pass


class NotScalarLoss(GridShieldError, ValueError):
    pass


class SizeMismatch(GridShieldError, ValueError):
    pass


class DivergedLoss(GridShieldError, RuntimeError):
    pass


class LengthMismatch(GridShieldError, ValueError):
    pass
