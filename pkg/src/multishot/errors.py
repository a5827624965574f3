"""Domain error hierarchy.

Every error a command can surface to the user derives from ``DomainError`` so
the CLI can map it to exit code 1 and print the class name.
"""


class DomainError(Exception):
    """Base class for recoverable, user-facing failures."""


# dataset
class SchemaError(DomainError):
    pass


class IntegrityError(DomainError):
    pass


class InvalidSpec(DomainError):
    pass


# curation
class DimensionMismatch(DomainError):
    pass


class ClientError(DomainError):
    pass


class RoleError(DomainError):
    """A client was used for a role it does not serve."""


# models
class ResolutionMismatch(DomainError):
    pass


class LengthMismatch(DomainError):
    pass


class ShapeMismatch(DomainError):
    pass


class QueryBlockMissing(DomainError, IndexError):
    pass


class ContextOverflow(DomainError):
    pass


class IncompatibleCheckpoint(DomainError):
    pass


# training
class UnknownStage(DomainError):
    pass


class DatasetTooSmall(DomainError):
    pass


# inference / evaluation
class EmptyShot(DomainError):
    pass


class NonPositiveScore(DomainError):
    pass


class EmbedderError(DomainError):
    pass
