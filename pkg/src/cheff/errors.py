"""Exception hierarchy shared by the library and the ``cheffctl`` CLI.

Every exception carries a short machine-readable ``code`` and the process
exit status the CLI uses when it escapes a command.
"""


class CheffError(Exception):
    code = "error"
    exit_code = 1


class ShapeError(CheffError, ValueError):
    code = "shape"
    exit_code = 2


class ConfigError(CheffError, ValueError):
    code = "config"
    exit_code = 2


class DataIOError(CheffError, OSError):
    code = "io"
    exit_code = 3


class CheckpointError(CheffError):
    code = "checkpoint"
    exit_code = 4


class CheckpointMagicError(CheckpointError):
    code = "checkpoint-magic"


class CheckpointTruncatedError(CheckpointError):
    code = "checkpoint-truncated"


class CheckpointChecksumError(CheckpointError):
    code = "checkpoint-checksum"


class CheckpointKindError(CheckpointError):
    code = "checkpoint-kind"


class CheckpointVersionError(CheckpointError):
    code = "checkpoint-version"


class NumericError(CheffError, FloatingPointError):
    code = "numeric"
    exit_code = 5
