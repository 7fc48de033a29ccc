"""Exception hierarchy; CLI exit codes hang off these classes."""


class SpecterError(Exception):
    exit_code = 1


class ValidationError(SpecterError, ValueError):
    exit_code = 2


class IdentificationError(SpecterError, ValueError):
    """A model cannot be evaluated or solved because unknowns remain."""

    exit_code = 3


class NumericError(SpecterError, RuntimeError):
    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class FitError(NumericError):
    pass


class AmbiguityError(IdentificationError):
    def __init__(self, message, roots):
        super().__init__(message)
        self.roots = list(roots)


class ShapeViolationError(SpecterError, ValueError):
    """Data do not have the decay shape an operation relies on."""

    exit_code = 3


class OracleUnsupportedError(SpecterError, ValueError):
    exit_code = 2


class ClassicalModelPrecluded(SpecterError):
    """Oscillatory (non-classical) signature found in a record."""

    exit_code = 4

    def __init__(self, message, record_index=None, detection=None):
        super().__init__(message)
        self.record_index = record_index
        self.detection = detection


class ProtocolFailure(SpecterError):
    exit_code = 3

    def __init__(self, message, ledger=None):
        super().__init__(message)
        self.ledger = ledger
