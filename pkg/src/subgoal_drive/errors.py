"""Exception hierarchy. CLI exit codes map onto the three top-level categories."""


class SubgoalDriveError(Exception):
    exit_code = 4


class ConfigError(SubgoalDriveError, ValueError):
    exit_code = 2


class DataError(SubgoalDriveError):
    exit_code = 3


class RuntimeFailure(SubgoalDriveError, RuntimeError):
    exit_code = 4


class DegeneratePathError(DataError, ValueError):
    pass


class CoincidentPointError(SubgoalDriveError, ValueError):
    pass


class InvalidVectorError(SubgoalDriveError, ValueError):
    pass


class InvalidActionError(SubgoalDriveError, ValueError):
    pass


class RecordingError(RuntimeFailure):
    pass


class ShapeError(SubgoalDriveError, ValueError):
    pass


class NonFiniteLossError(RuntimeFailure):
    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class FormatError(DataError):
    pass
