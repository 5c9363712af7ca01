"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shapes or arguments."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class NumericError(ArithmeticError):
    """Non-finite values encountered during computation."""


class ContractError(RuntimeError):
    """A caller-side contract was violated (mismatched lengths, families, ...)."""
