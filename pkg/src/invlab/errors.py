"""Exception hierarchy shared across the package."""


class InvlabError(Exception):
    """Base class for all invlab errors."""


class InvalidParams(InvlabError, ValueError):
    pass


class GridDegenerate(InvlabError, ValueError):
    pass


class EtaSingular(InvlabError, ArithmeticError):
    pass


class ShapeMismatch(InvlabError, ValueError):
    pass


class NonFiniteLatent(InvlabError, ValueError):
    pass


class AlphaBoundary(InvlabError, ArithmeticError):
    """Raised when a conversion would divide by sqrt(alpha_bar) = 0 or sqrt(1 - alpha_bar) = 0."""


class DivergenceError(InvlabError, ArithmeticError):
    pass


class NoConvergence(InvlabError, RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class UnknownMethod(InvlabError, ValueError):
    pass


class ConfigError(InvlabError, ValueError):
    """Schema violation or unreadable config. ``path`` names the offending field."""

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
