"""Exception hierarchy.

Validation problems (bad input shape, schema, parse failures) and numeric
failures (non-convergence, indefinite matrices) are kept apart so the CLI can
map them onto distinct exit codes.
"""


class GroupDRLError(Exception):
    """Base class for all package errors."""


class ValidationError(GroupDRLError, ValueError):
    """Input violates a documented precondition."""


class SchemaError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class NumericError(GroupDRLError, ArithmeticError):
    """A numerical routine failed (non-finite values, non-convergence...)."""


class ConvergenceError(NumericError):
    pass


class IndefiniteMatrixError(NumericError):
    pass


class DegenerateDifferenceError(NumericError):
    pass


class StageError(GroupDRLError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class ProtocolError(GroupDRLError):
    """A federated site failed; carries the phase and the site id."""

    def __init__(self, phase: str, site: str, cause: BaseException):
        self.phase = phase
        self.site = site
        self.cause = cause
        super().__init__(f"phase '{phase}' failed at site '{site}': {cause}")


class PrivacyViolation(GroupDRLError):
    def __init__(self, message_index: int, kind: str, sender: str, detail: str):
        self.message_index = message_index
        self.kind = kind
        self.sender = sender
        super().__init__(
            f"message #{message_index} ({kind} from {sender}) leaks source data: {detail}"
        )
