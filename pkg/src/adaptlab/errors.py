"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """Backward-pass contract violated (non-scalar root, detached root, ...)."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class TokenError(ValueError):
    """A token id or string is outside the vocabulary."""


class InputLengthError(ValueError):
    """An input sequence is too short for the configured model."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """A data set does not satisfy the requirements of an operation."""


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""
