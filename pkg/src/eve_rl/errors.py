"""Exception types shared across the package."""


class EveError(Exception):
    """Base class for library errors."""


class ConfigError(EveError, ValueError):
    """Invalid configuration or argument value."""


class ContractError(EveError, ValueError):
    """A precondition on shapes, indices or finiteness was violated."""


class DivergenceError(EveError, RuntimeError):
    """Q-values or learning targets left the finite/bounded range."""
