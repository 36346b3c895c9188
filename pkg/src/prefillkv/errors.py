"""Exception hierarchy shared by every module.

The CLI maps each family onto a distinct exit status (see ``cli.EXIT_CODES``).
"""


class PrefillError(Exception):
    """Base class for all errors raised by this package."""

    category = "numeric"


class InvalidArgument(PrefillError, ValueError):
    category = "config"


class InvalidConfiguration(PrefillError, ValueError):
    category = "config"


class InvalidState(PrefillError, RuntimeError):
    category = "numeric"


class ContractViolation(PrefillError, RuntimeError):
    """An operation was asked to break a cache invariant (e.g. drop a protected entry)."""

    category = "numeric"
