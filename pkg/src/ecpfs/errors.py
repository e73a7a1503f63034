"""Exception hierarchy shared by every ecpfs module."""


class EcpfsError(Exception):
    """Base class for all errors raised by ecpfs."""


class ConfigError(EcpfsError, ValueError):
    """An index, cache or search configuration violates its invariants."""


class StoreError(EcpfsError):
    """The on-disk index store is missing, corrupt or cannot be written."""


class StoreExistsError(StoreError):
    pass


class ManifestError(StoreError):
    """The ``info`` attributes are missing or fail validation."""


class NodeAbsentError(StoreError, KeyError):
    """A node was never written (distinct from an empty node)."""

    def __str__(self):
        return Exception.__str__(self)


class FormatError(EcpfsError, ValueError):
    """A vector input file is truncated or internally inconsistent."""


class InvalidQueryError(EcpfsError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class QueryBusyError(EcpfsError, RuntimeError):
    """A query id is already being driven by another caller."""
