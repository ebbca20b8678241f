"""Exception hierarchy."""


class ArenaError(Exception):
    """Base class for all errors raised by arenasim."""


class ValidationError(ArenaError, ValueError):
    """An input violates a documented precondition."""


class MapParseError(ArenaError):
    """The map source is not well-formed."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EmptyMapError(ArenaError):
    """The map contains no road ways."""


class TopologyError(ArenaError):
    """The map references elements that do not exist."""

    def __init__(self, message: str, ids=()):
        super().__init__(message)
        self.ids = tuple(ids)


class SnapError(ArenaError):
    """A route endpoint is too far from every lane."""


class UnreachableError(ArenaError):
    """No lane sequence connects start and goal."""


class SaturationError(ArenaError):
    """Requested traffic density does not fit the available lane length."""

    def __init__(self, message: str, achievable: int):
        super().__init__(message)
        self.achievable = achievable


class ContractError(ArenaError):
    """A caller broke an operation contract (e.g. missing ego plan)."""


class ContractViolation(ArenaError):
    """A peer service returned a message that violates the protocol contract."""


class ProtocolError(ArenaError):
    """A wire message could not be parsed."""


class TransportError(ArenaError):
    """A remote call failed at the transport level."""

    def __init__(self, message: str, retry_budget_exhausted: bool = True, timeout: bool = False):
        super().__init__(message)
        self.retry_budget_exhausted = retry_budget_exhausted
        self.timeout = timeout


class IntegrityError(ArenaError):
    """An episode log failed hash-chain verification."""

    def __init__(self, message: str, record: int):
        super().__init__(message)
        self.record = record


class ConfigError(ArenaError, ValueError):
    """A configuration document failed schema validation."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(message)
        self.field = field
