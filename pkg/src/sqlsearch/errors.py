"""Exception hierarchy shared across the package."""


class SqlSearchError(Exception):
    """Base class for all package errors."""


class ConfigError(SqlSearchError, ValueError):
    pass


class TokenizeError(SqlSearchError, ValueError):
    pass


class NotADatabase(SqlSearchError):
    pass


class ComparisonOnError(SqlSearchError, ValueError):
    pass


class MissingGold(SqlSearchError, ValueError):
    pass


class PolicyUnavailable(SqlSearchError):
    pass


class EmptyBeam(SqlSearchError):
    pass


class UnscorableSequence(SqlSearchError):
    pass


class NonFiniteLogprob(SqlSearchError, ValueError):
    pass


class EmptyCandidateSet(SqlSearchError, ValueError):
    pass


class DeadEnd(SqlSearchError):
    pass


class UnknownTaskId(SqlSearchError, KeyError):
    pass
