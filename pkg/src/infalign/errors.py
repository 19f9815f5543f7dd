"""Exception hierarchy shared by every module."""


class InfAlignError(Exception):
    """Base class for all library errors."""


class InvalidParameter(InfAlignError, ValueError):
    pass


class InvalidReward(InfAlignError, ValueError):
    pass


class MissingPrompt(InfAlignError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else "missing prompt"


class DomainError(InfAlignError, ValueError):
    pass


class UnsupportedProcedure(InfAlignError, NotImplementedError):
    """Raised when no analytic route exists for a procedure variant."""


class ConfigError(InfAlignError):
    pass


class VerificationError(InfAlignError):
    """A numerical identity that must hold by construction did not."""
