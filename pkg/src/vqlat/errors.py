"""Exception taxonomy shared across the package."""


class ContractError(Exception):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operands have incompatible shapes."""


class InputError(ContractError):
    """User-supplied data is malformed (out-of-vocabulary id, empty input, ...)."""


class NoAnchorError(ContractError):
    """No shared span could be located between two premises."""
