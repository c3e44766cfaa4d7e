"""Exception hierarchy shared by every module of the package."""


class M3DNError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(M3DNError, ValueError):
    pass


class NegativeEntry(M3DNError, ValueError):
    pass


class AllZero(M3DNError, ValueError):
    pass


class NotNormalized(M3DNError, ValueError):
    pass


class NumericalUnderflow(M3DNError, ArithmeticError):
    """Sinkhorn scalings left the representable range (lambda too large for the cost scale)."""


class DegenerateBasis(M3DNError, ArithmeticError):
    pass


class NotPSD(M3DNError, ValueError):
    pass


class SingularReference(M3DNError, ValueError):
    pass


class NonPositiveDefiniteArgument(M3DNError, ValueError):
    pass


class SingularSystem(M3DNError, ArithmeticError):
    pass


class EigenFailure(M3DNError, ArithmeticError):
    pass


class EmptyLabelSet(M3DNError, ValueError):
    pass


class NonFiniteActivation(M3DNError, ArithmeticError):
    pass


class NoDecoder(M3DNError, ValueError):
    pass


class StaleCache(M3DNError, RuntimeError):
    """backward() was handed a cache that does not belong to the current bags/parameters."""


class NoLabeledData(M3DNError, ValueError):
    pass


class NonFiniteObjective(M3DNError, ArithmeticError):
    def __init__(self, epoch, value):
        super().__init__(f"non-finite objective {value!r} at epoch {epoch}")
        self.epoch = epoch
        self.value = value


class NoInput(M3DNError, ValueError):
    pass


class EmptyInput(M3DNError, ValueError):
    pass


class InvalidConfig(M3DNError, ValueError):
    """Configuration rejected; ``field`` holds the dotted path of the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class InsufficientData(M3DNError, ValueError):
    pass


class ParseError(M3DNError, ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaVersionMismatch(ParseError):
    pass


class DimensionInconsistency(ParseError):
    pass
