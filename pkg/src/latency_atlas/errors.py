"""Exception hierarchy.

The CLI maps these onto exit codes: ``UsageError`` and ``ValidationError``
subclasses exit 1, ``DataContractError`` subclasses exit 2.
"""


class LatencyAtlasError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(LatencyAtlasError):
    """Bad combination of arguments or flags."""


class ValidationError(LatencyAtlasError, ValueError):
    """A value violates a domain invariant (range, one-hot, presence)."""

    def __init__(self, message, *, layer_index=None, field=None):
        self.layer_index = layer_index
        self.field = field
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)


class GeometryError(ValidationError):
    """Convolution/pooling arithmetic produced a non-positive dimension."""


class ShapeMismatchError(ValidationError):
    """Two adjacent layers disagree on the tensor shape between them."""

    def __init__(self, message, *, upstream=None, downstream=None):
        self.upstream = upstream
        self.downstream = downstream
        super().__init__(message)


class DomainError(ValidationError):
    """Loss or metric evaluated outside its mathematical domain."""


class DataContractError(LatencyAtlasError):
    """An input file does not honour its documented format."""


class ParseError(DataContractError):
    """Malformed document (invalid JSON, wrong top-level structure)."""


class HeaderMismatchError(DataContractError):
    """CSV header does not match the expected column contract."""


class RowError(DataContractError):
    """A CSV data row holds a non-numeric or out-of-domain cell."""

    def __init__(self, message, *, row=None, column=None):
        self.row = row
        self.column = column
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class LayoutMismatchError(DataContractError):
    """Feature layout of a dataset or vector differs from what a model expects."""


class BundleVersionError(DataContractError):
    """Bundle archive written with an unsupported format version."""


class ChecksumError(DataContractError):
    """Bundle archive is truncated or corrupted."""
