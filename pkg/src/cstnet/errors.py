"""Exception types raised across the package."""


class CSTNetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CSTNetError, ValueError):
    pass


class ConfigurationError(CSTNetError, ValueError):
    pass


class LayoutError(CSTNetError, ValueError):
    """Token count does not match the declared spatial grid."""


class UnsupportedKernelError(CSTNetError, ValueError):
    pass


class NumericDomainError(CSTNetError, ValueError):
    pass


class ContractError(CSTNetError, ValueError):
    """A documented precondition of an operation was violated."""


class DeterminismError(CSTNetError, RuntimeError):
    pass


class DivergenceError(CSTNetError, RuntimeError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class CheckpointError(CSTNetError, IOError):
    pass
