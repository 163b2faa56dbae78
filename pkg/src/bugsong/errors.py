"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, aborted training exits 3. Anything else is a bug and
surfaces as a traceback.
"""


class BugsongError(Exception):
    """Base class for all expected failures."""


class ConfigError(BugsongError):
    """Bad configuration or CLI usage. Exit code 1."""


class DataError(BugsongError):
    """Unreadable, malformed, or missing input data. Exit code 2."""


class TrainingAborted(BugsongError):
    """Training stopped on non-finite loss or a broken invariant. Exit code 3."""
