"""Exception types shared across the package."""


class ContractError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


class NumericFailure(RuntimeError):
    """Raised when a computation produces non-finite values or fails to converge."""
