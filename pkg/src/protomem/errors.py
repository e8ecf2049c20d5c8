"""Exception taxonomy shared across the package.

Each class marks a distinct failure surface so callers (and the CLI exit-code
mapping) can tell bad inputs apart from internal contract breaks.
"""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class DomainError(ValueError):
    """Values are outside the mathematical domain of an operation."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the finite domain."""


class StateError(RuntimeError):
    """An object was used in an order its lifecycle forbids."""


class DataError(ValueError):
    """Dataset contents violate a documented requirement."""


class FormatError(ValueError):
    """A file does not parse as its documented format."""


class ConfigError(ValueError):
    """A run configuration is malformed or inconsistent."""


class ContractError(RuntimeError):
    """A caller broke an API precondition (wrong index class, empty batch, ...)."""
