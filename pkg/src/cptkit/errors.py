"""Exception hierarchy. The CLI maps each class to an exit code."""


class CptError(Exception):
    """Base class for all library errors."""


class DataError(CptError, ValueError):
    """Malformed or missing input data (CSV rows, JSON documents, files)."""


class DomainError(CptError, ValueError):
    """A model was evaluated outside its domain (bad dimension, unseen route, zero mass)."""


class PreconditionError(CptError, ValueError):
    """An operation's numerical or size precondition does not hold."""
