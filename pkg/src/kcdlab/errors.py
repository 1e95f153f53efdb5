"""Exception hierarchy shared by all kcdlab modules."""


class KcdLabError(Exception):
    """Base class for every error raised by kcdlab."""


class InvalidInputError(KcdLabError, ValueError):
    pass


class ShapeError(KcdLabError, ValueError):
    pass


class InvalidParameterError(KcdLabError, ValueError):
    pass


class InsufficientDataError(KcdLabError, ValueError):
    def __init__(self, role, requested, available):
        self.role = role
        self.requested = requested
        self.available = available
        super().__init__(
            f"insufficient data for role {role!r}: requested {requested}, "
            f"only {available} available"
        )


class ProtocolViolationError(KcdLabError):
    """A defense's data-separation rule would be broken."""


class TrainingDivergedError(KcdLabError, RuntimeError):
    def __init__(self, epoch, message="non-finite loss"):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}: {message}")


class ParseError(KcdLabError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class SchemaError(KcdLabError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        prefix = f"field {field!r}: " if field else ""
        super().__init__(prefix + message)
