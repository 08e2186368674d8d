"""Exception types shared across the package."""


class HiresError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(HiresError, ValueError):
    pass


class NumericError(HiresError, ArithmeticError):
    pass


class ContractError(HiresError, RuntimeError):
    """A caller broke a documented pre-condition."""


class InputError(HiresError, ValueError):
    pass


class ConfigurationError(HiresError, ValueError):
    pass


class TrainingDivergedError(HiresError, RuntimeError):
    pass
