"""Exception types shared across the package."""


class LcpseqError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LcpseqError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(LcpseqError):
    """A documented precondition was violated by the caller."""


class NumericError(LcpseqError):
    """A computation produced or encountered a non-finite value."""


class ValidationError(LcpseqError):
    """Input data fails a structural validity check (e.g. not a rotation)."""


class ParseError(LcpseqError):
    """A file could not be parsed; message carries the line number."""


class SchemaError(ParseError):
    """A file parses token-wise but violates the declared layout."""


class FormatError(LcpseqError):
    """A binary file does not carry the expected magic/version."""


class IntegrityError(LcpseqError):
    """A binary file is truncated or fails its checksum."""


class ConfigError(LcpseqError):
    """Configuration is inconsistent with the data or model at hand."""
