"""Exception hierarchy shared by every module, with the CLI exit code each maps to."""


class CodecError(Exception):
    exit_code = 1


class ConfigError(CodecError):
    exit_code = 3


class FormatError(CodecError):
    exit_code = 4


class FramingError(FormatError):
    def __init__(self, message: str, byte_offset: int, tick: int | None = None):
        super().__init__(message)
        self.byte_offset = byte_offset
        self.tick = tick


class EncodingError(FormatError):
    pass


class TrainingAbort(CodecError):
    exit_code = 5


class EstimationUnavailable(CodecError):
    exit_code = 6


class ContractViolation(CodecError, ValueError):
    exit_code = 7


class PartitionLookupError(CodecError, KeyError):
    exit_code = 8

    def __str__(self):
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class UndefinedMetric(CodecError):
    exit_code = 9
