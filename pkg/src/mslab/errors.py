"""Exception types shared across the package.

Exit-code mapping used by the CLI: ValidationError -> 1, NumericalError -> 2.
"""


class MslabError(Exception):
    """Base class for all package errors."""


class ValidationError(MslabError):
    """Bad input: config, expression, schedule or argument-signature violations."""


class ExpressionError(ValidationError):
    """Syntax or identifier error in a coefficient expression.

    Carries the 0-based position in the source text when known.
    """

    def __init__(self, message, pos=None, text=None):
        self.pos = pos
        self.text = text
        if pos is not None:
            message = f"{message} (at position {pos})"
        super().__init__(message)


class EvaluationError(MslabError):
    """Non-finite result or division by zero while evaluating an expression.

    ``where`` records the offending node's source position (or -1 for
    synthesized nodes) and the argument values.
    """

    def __init__(self, message, where=None):
        self.where = where
        if where is not None:
            message = f"{message} [{where}]"
        super().__init__(message)


class BoundaryUnclassifiableError(ValidationError):
    """Scale schedule sits on (or outside) a regime boundary; no theorem applies."""


class NumericalError(MslabError):
    """A run-time numerical failure: explosion cap exceeded, centering violation."""


class StiffnessError(ValidationError):
    """Time step violates the dt <= alpha_eps^2 / 20 integrator precondition."""


class ExplosionError(NumericalError):
    """A simulated path left the explosion guard region."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class CenteringError(NumericalError):
    """A Poisson right-hand side failed the centering check."""

    def __init__(self, message, residual=None, stderr=None, level=None):
        self.residual = residual
        self.stderr = stderr
        self.level = level
        super().__init__(message)


class FitError(ValidationError):
    """Rate fit rejected: fewer than 3 points or nonpositive error values."""
