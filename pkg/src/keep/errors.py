"""Exception hierarchy.

Each class carries the CLI exit code and a short category label so the
command-line layer can map failures without a lookup table.
"""


class KeepError(Exception):
    exit_code = 1
    category = "internal"


class InvalidArgumentError(KeepError, ValueError):
    exit_code = 3
    category = "invalid-argument"


class InvalidStateError(KeepError, RuntimeError):
    exit_code = 4
    category = "invalid-state"


class RankDeficiencyError(InvalidArgumentError):
    exit_code = 5
    category = "rank-deficient"


class FormatError(KeepError, ValueError):
    """A file exists but its contents do not parse."""

    exit_code = 6
    category = "malformed-file"


class KeepIOError(KeepError, OSError):
    exit_code = 7
    category = "io"


class ConfigError(KeepError, ValueError):
    exit_code = 8
    category = "config"


class ExternalToolError(KeepError, RuntimeError):
    exit_code = 9
    category = "external-tool"
