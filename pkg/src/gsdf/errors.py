"""Exception hierarchy shared across the pipeline.

Each class carries the CLI exit code so subcommands can map failures
without a lookup table: 2 bad input, 3 numeric failure, 4 empty result.
"""


class GsdfError(Exception):
    exit_code = 1


class InvalidInputError(GsdfError):
    """Malformed parameters, files, or schema violations."""

    exit_code = 2


class NumericFailureError(GsdfError):
    """Non-finite values or diverged optimization."""

    exit_code = 3


class EmptyResultError(GsdfError):
    """An operation legitimately ran but produced nothing usable."""

    exit_code = 4
