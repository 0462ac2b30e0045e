class ValidationError(ValueError):
    """Bad input data, config, or file content. CLI exit code 1."""


class NumericalError(ArithmeticError):
    """NaN/Inf appeared where only finite values are allowed. CLI exit code 2."""
