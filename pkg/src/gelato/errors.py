"""Exception hierarchy.

Errors are grouped by the CLI exit-code contract: usage problems exit 2
(argparse handles those), data/format problems exit 3, numeric failures
exit 4.
"""


class GelatoError(Exception):
    """Base class for all package errors."""


# ---------------------------------------------------------------- numeric

class NumericError(GelatoError):
    """Non-finite values or other numeric breakdown."""


class ZeroNormError(NumericError):
    """A vector whose L2 norm is at or below the norm floor."""


class DegenerateInputError(NumericError):
    """Input too small for the operation to be meaningful (e.g. layer
    normalization over fewer than two features)."""


# ------------------------------------------------------------ data/format

class DataError(GelatoError):
    """Base for structural and format problems."""


class DimensionError(DataError):
    """Shape mismatch between operands; the message names both shapes."""


class PatchingError(DataError):
    """Image dimensions not divisible by the patch size."""


class MergeIncompatibilityError(DataError):
    """Patch grid with an odd row or column count cannot be 2x2-merged."""


class TooShortError(DataError):
    """Audio signal shorter than one analysis frame."""


class EmptyInputError(DataError):
    """Empty sequence or empty feature input where at least one element
    is required."""


class StructureError(DataError):
    """Malformed input item (e.g. nested mixed items)."""


class SlotMismatchError(DataError):
    """Placeholder slot count disagrees with produced feature count."""


class ModalityUnavailableError(DataError):
    """The loaded bundle does not cover a modality the input requires."""


class VariantNotFoundError(DataError):
    """Requested task variant missing from a checkpoint."""


class IntegrityError(DataError):
    """Corrupt or truncated checkpoint / media file."""


class ConfigurationError(DataError):
    """Invalid run configuration (empty mixture, bad scope, ...)."""


class UndefinedMetricError(DataError):
    """Metric requested for a query with no relevant documents."""
