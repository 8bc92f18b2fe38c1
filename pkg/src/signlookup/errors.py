"""Exception taxonomy shared by all signlookup modules."""


class SignLookupError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SignLookupError):
    """Operand shapes are inconsistent (dimension mismatch, bad extents)."""


class NumericError(SignLookupError):
    """A value that must be finite is NaN or infinite."""


class ConfigError(SignLookupError):
    """Invalid configuration (bad hyperparameter, malformed config file)."""


class BoundsError(SignLookupError):
    """An index lies outside its valid range."""


class CorpusError(SignLookupError):
    """A dataset is internally inconsistent (missing gloss, bad split)."""


class FormatError(SignLookupError):
    """A file failed to parse; the message carries the offending location."""


class DataError(SignLookupError):
    """Semantically invalid data (inverted or overlapping segments)."""
