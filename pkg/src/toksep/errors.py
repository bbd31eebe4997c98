"""Exception types shared across the package.

The CLI maps :class:`ValidationError` to exit code 1 and every other
:class:`ToksepError` to exit code 2.
"""


class ToksepError(Exception):
    pass


class ValidationError(ToksepError, ValueError):
    """Bad input, bad config, or a violated precondition."""


class TrainingDiverged(ToksepError, RuntimeError):
    pass


class CacheInvalid(ToksepError, RuntimeError):
    pass
