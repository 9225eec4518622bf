"""Exception hierarchy shared by all modules."""


class RpcVolError(Exception):
    """Base class for all errors raised by rpcvol."""


class DomainError(RpcVolError, ValueError):
    pass


class SingularityError(RpcVolError, ArithmeticError):
    pass


class ConvergenceError(RpcVolError):
    pass


class SingularJacobianError(SingularityError, ConvergenceError):
    """Newton step impossible: the local Jacobian is singular.

    It is both a singularity and a failure to converge, so callers may catch
    either.
    """


class FitError(RpcVolError):
    pass


class InsufficientDataError(RpcVolError, ValueError):
    pass


class NoGeometryError(RpcVolError):
    pass


class RegressionError(RpcVolError):
    pass


class DegenerateGeometryError(RpcVolError):
    pass


class ConnectivityError(RpcVolError):
    pass


class FrameError(RpcVolError, ValueError):
    pass


class OverlapError(RpcVolError):
    pass


class GenerationError(RpcVolError):
    pass
