class CkksError(Exception):
    """Base class for all faults raised by the HE engine."""


class ParameterError(CkksError):
    pass


class EncodingError(CkksError):
    pass


class LevelError(CkksError):
    """Operands at different levels, or a level that cannot be reached."""


class DepthExhaustedError(LevelError):
    pass


class ScaleError(CkksError):
    pass


class MissingKeyError(CkksError):
    """Missing or mismatched key material."""


class SerializationError(CkksError):
    code = 0


class BadMagicError(SerializationError):
    code = 1


class ParamsMismatchError(SerializationError):
    code = 2


class TruncatedError(SerializationError):
    code = 3


class UnsupportedVersionError(SerializationError):
    code = 4
