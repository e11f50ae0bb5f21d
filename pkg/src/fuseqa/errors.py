"""Shared exception types, mapped onto CLI exit codes (config -> 1, contract -> 2)."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's precondition."""


class ContractError(ValueError):
    """A non-shape precondition was violated."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""
