"""Exception hierarchy. CLI exit codes hang off these classes."""


class IcnetError(Exception):
    exit_code = 1


class ShapeError(IcnetError, ValueError):
    """Tensor dimensions incompatible with an operation."""


class SpecError(IcnetError, ValueError):
    """Inconsistent network description."""

    exit_code = 3


class StructuralError(IcnetError):
    """Model graph cannot undergo the requested transformation."""


class ConfigError(IcnetError, ValueError):
    exit_code = 2


class DataError(IcnetError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


class NumericError(IcnetError, ArithmeticError):
    exit_code = 4


class CheckpointError(IcnetError):
    exit_code = 3


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCRCError(CheckpointError):
    pass


class ConfigHashMismatchError(CheckpointError):
    def __init__(self, expected, found):
        super().__init__(f"config hash mismatch: model expects {expected}, checkpoint has {found}")
        self.expected = expected
        self.found = found
