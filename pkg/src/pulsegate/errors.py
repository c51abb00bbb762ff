"""Exception hierarchy shared by all pulsegate modules.

The CLI maps each branch of this tree onto a process exit code, so new
exceptions should subclass the branch whose exit code they deserve.
"""


class PulsegateError(Exception):
    """Base class for every error raised on purpose by this package."""


# -- configuration (exit 2) -------------------------------------------------

class ConfigError(PulsegateError):
    pass


class BadSpec(ConfigError):
    pass


class WidthMismatch(ConfigError):
    pass


# -- data and I/O (exit 3) --------------------------------------------------

class DataError(PulsegateError):
    pass


class MissingColumn(DataError):
    def __init__(self, name):
        super().__init__(f"missing column {name!r}")
        self.name = name


class MalformedRow(DataError):
    def __init__(self, line_no, reason=""):
        msg = f"malformed row at line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.line_no = line_no


class NonMonotoneSepsisLabel(DataError):
    pass


class AllMissing(DataError):
    pass


class NoMinorityClass(DataError):
    pass


class EmptyPartition(DataError):
    pass


class SingleClass(DataError):
    pass


class NoPositives(DataError):
    pass


class FormatError(DataError):
    """Model container could not be decoded."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class ChecksumMismatch(FormatError):
    pass


# -- numerics (exit 4) ------------------------------------------------------

class NumericError(PulsegateError):
    pass


class ShapeMismatch(NumericError, ValueError):
    pass


class KernelTooLarge(ShapeMismatch):
    pass


class DegenerateBatch(NumericError, ValueError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, epoch, value):
        super().__init__(f"non-finite training loss {value!r} at epoch {epoch}")
        self.epoch = epoch
        self.value = value


# -- search (exit 5) --------------------------------------------------------

class AllDiverged(PulsegateError):
    pass


# -- horizon (exit 6) -------------------------------------------------------

class HorizonMismatch(PulsegateError):
    pass
