"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: config/usage problems exit 2,
verification failures (gradient checks) exit 3, and everything else that
goes wrong at runtime (bad files, divergence, I/O) exits 1.
"""


class ProtoheadError(Exception):
    """Base class for all package errors."""


class ConfigError(ProtoheadError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(ProtoheadError):
    """A file does not conform to its declared on-disk format."""


class DataValidationError(ProtoheadError):
    """Dataset contents violate an invariant (label range, row counts, ...)."""


class DivergenceError(ProtoheadError):
    """Training produced a non-finite loss."""


class VerificationError(ProtoheadError):
    """A scientific verification (gradient check) exceeded its tolerance."""


class StaleCacheError(ProtoheadError):
    """A backward pass received a cache from an outdated forward pass."""
