"""Exception hierarchy.

Everything raised on purpose by the engine derives from :class:`MapisError`
so callers (CLI, HTTP service) can separate expected failures from bugs.
"""
from __future__ import annotations


class MapisError(Exception):
    pass


class SchemaError(MapisError, ValueError):
    """A document failed validation. ``violations`` lists field-level messages."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MappingError(MapisError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "mapping error"


class UnitError(MapisError, ValueError):
    pass


class ConfigError(MapisError, ValueError):
    pass


class BackendError(MapisError):
    """An agent backend could not produce a usable reply."""


class ReplyError(BackendError):
    """A reply could not be parsed into the expected schema."""


class CassetteMiss(BackendError):
    pass


class SliceError(BackendError):
    pass


class PromptAssemblyError(MapisError, ValueError):
    pass


class EmbedError(MapisError):
    pass


class EmptyGraph(MapisError):
    pass


class EmptyCorpus(MapisError):
    pass


class GraphIntegrityError(MapisError, ValueError):
    pass


class DictionaryError(MapisError, ValueError):
    pass


class StorageError(MapisError):
    pass


class SessionExists(StorageError):
    pass


class EvaluationAborted(MapisError):
    """Too many cases failed; ``metrics`` holds the partial results."""

    def __init__(self, message: str, metrics=None):
        super().__init__(message)
        self.metrics = metrics
