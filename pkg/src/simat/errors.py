"""Exception hierarchy shared by all engine modules.

Every error maps to a process exit code so the CLI and the service agree
on failure semantics: 2 = usage/config, 3 = data/coverage, 4 = numeric.
"""


class SimatError(Exception):
    """Base class for all engine errors."""

    exit_code = 1
    kind = "error"


class ArgumentError(SimatError):
    """A caller passed an argument violating an operation precondition."""

    exit_code = 2
    kind = "argument"


class ConfigError(SimatError):
    """A config object or flag set is invalid."""

    exit_code = 2
    kind = "config"


class UsageError(SimatError):
    """Malformed command invocation."""

    exit_code = 2
    kind = "usage"


class FormatError(SimatError):
    """A binary or TSV file does not conform to its on-disk format."""

    exit_code = 3
    kind = "format"


class ValidationError(SimatError):
    """Loaded data violates a dataset invariant (dangling ids, dim mismatch...)."""

    exit_code = 3
    kind = "validation"


class CoverageError(SimatError):
    """A required (image, caption) score or caption pair is missing."""

    exit_code = 3
    kind = "coverage"

    def __init__(self, message, missing=None):
        super().__init__(message)
        self.missing = list(missing) if missing else []


class TokenLookupError(SimatError):
    """A token or id could not be resolved."""

    exit_code = 3
    kind = "lookup"


class StorageError(SimatError):
    """An I/O failure, annotated with the offending path."""

    exit_code = 3
    kind = "io"


class TransportError(SimatError):
    """Remote oracle failure after retries."""

    exit_code = 3
    kind = "transport"


class EmptyResultError(SimatError):
    """A retrieval excluded every candidate."""

    exit_code = 3
    kind = "empty_result"


class GenerationError(SimatError):
    """A synthetic world config produced no usable queries."""

    exit_code = 3
    kind = "generation"


class NumericError(SimatError):
    """A numeric check failed (gradient check, non-finite values)."""

    exit_code = 4
    kind = "numeric"


class TrainingError(SimatError):
    """Training diverged; carries the epoch/batch where loss went non-finite."""

    exit_code = 4
    kind = "training"

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
