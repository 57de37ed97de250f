"""Exception hierarchy; each family carries the CLI exit code."""


class VolprintError(Exception):
    exit_code = 1


class ConfigError(VolprintError):
    exit_code = 2


class InputOutputError(VolprintError):
    exit_code = 3


class DataError(VolprintError):
    exit_code = 4


# Configuration
class InvalidConfig(ConfigError):
    pass


class InvalidSpec(ConfigError):
    pass


class OverlappingModalities(ConfigError):
    pass


# Files and formats
class MissingInput(InputOutputError):
    pass


class UnsupportedFormat(InputOutputError):
    pass


class CorruptHeader(InputOutputError):
    pass


class TruncatedData(InputOutputError):
    pass


class BadMagic(InputOutputError):
    pass


class VersionMismatch(InputOutputError):
    pass


class Truncated(InputOutputError):
    pass


# Data
class SpacingOverflow(DataError):
    pass


class VolumeTooSmall(DataError):
    pass


class DuplicateModality(DataError):
    pass


class EmptyCohort(DataError):
    pass


class UnknownSubject(DataError):
    pass


class NoProbes(DataError):
    pass


class TooFewPairs(DataError):
    pass


class SliceOutOfRange(DataError):
    pass


class InconsistentZygosity(DataError):
    pass


class DuplicateRecord(DataError):
    pass


class SubjectMismatch(DataError):
    pass
