"""Exception hierarchy shared by every module."""


class PgdpoError(Exception):
    pass


class UsageError(PgdpoError, ValueError):
    """Caller violated a precondition (bad sizes, mixed tapes, ...)."""


class DomainError(PgdpoError, ValueError):
    """Argument outside the mathematical domain of a function."""


class NumericError(PgdpoError, ArithmeticError):
    """A NaN or infinity showed up where a finite number was required.

    ``node``, ``path`` and ``step`` locate the failure when known.
    """

    def __init__(self, msg, node=None, path=None, step=None):
        super().__init__(msg)
        self.node = node
        self.path = path
        self.step = step


class ConfigError(PgdpoError, ValueError):
    def __init__(self, field, msg):
        super().__init__(f"{field}: {msg}")
        self.field = field


class CheckpointError(PgdpoError):
    pass
