class FedPTError(Exception):
    pass


class ConfigError(FedPTError, ValueError):
    pass


class DimensionError(FedPTError, ValueError):
    pass


class DataError(FedPTError, ValueError):
    pass


class IntegrityError(FedPTError, ValueError):
    pass


class UsageError(FedPTError, ValueError):
    pass


class NumericError(FedPTError, ArithmeticError):
    pass


class RoundError(FedPTError, RuntimeError):
    pass


class FormatError(FedPTError, ValueError):
    pass
