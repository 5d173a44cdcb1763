"""Exception taxonomy shared by all medseq modules.

CLI exit-code mapping: ValidationError/ConfigError -> 2, any other
MedseqError -> 3 (argparse usage errors exit 1 on their own).
"""


class MedseqError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MedseqError):
    """Malformed data: bad codes, bad corpus rows, invariant violations."""


class ConfigError(MedseqError):
    """Invalid or out-of-range configuration values."""


class CorpusFormatError(ValidationError):
    """Corpus file violation, carrying the offending line and field."""

    def __init__(self, message: str, line_no: int | None = None, field: str | None = None):
        self.line_no = line_no
        self.field = field
        where = []
        if line_no is not None:
            where.append(f"line {line_no}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ShapeError(MedseqError):
    """Incompatible tensor shapes passed to a numeric op."""


class DivergenceError(MedseqError):
    """Training produced a non-finite loss."""
