"""Exception hierarchy shared by all pipeline stages."""


class HefError(Exception):
    """Base class for every error raised by this package."""


class ContractError(HefError, ValueError):
    """A caller violated a documented precondition (shapes, norms, sizes)."""


class ConfigError(HefError, ValueError):
    """Invalid configuration, e.g. too few repositories to form negatives."""


class CorpusError(HefError, ValueError):
    """Input text could not be accepted (e.g. invalid UTF-8)."""


class VectorImportError(HefError, ValueError):
    """A record in an external vector file was malformed or had the wrong dim."""


class EmptyRepoError(HefError, ValueError):
    """The repository contained nothing to chunk."""


class StaleParamsError(HefError):
    """Fuser parameters or embedder settings differ from the ones a cache was built with."""


class NonFiniteError(HefError, FloatingPointError):
    """A forward or backward pass produced NaN/Inf in the named block."""


class CacheFormatError(HefError):
    """Cache file is not a cache file (bad magic, unsupported version, bad layout)."""


class CacheTruncatedError(CacheFormatError):
    """Cache file ends before a section is complete."""


class CacheChecksumError(CacheFormatError):
    """A section's CRC-32 does not match its contents."""


class CacheInvariantError(CacheFormatError):
    """Decoded cache violates tree, provenance or norm invariants."""
