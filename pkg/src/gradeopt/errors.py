"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, BackendError -> 2,
RunInterrupted -> 3.
"""


class GradeoptError(Exception):
    """Base class for all package errors."""


class ConfigError(GradeoptError):
    """Invalid configuration, dataset, or request payload."""


class BackendError(GradeoptError):
    """A grader or embedding backend failed after retries."""


class RunInterrupted(GradeoptError):
    """A run stopped at a resumable boundary (e.g. output dir locked)."""
