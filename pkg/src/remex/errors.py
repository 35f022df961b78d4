"""Exception taxonomy.

The CLI maps these to exit codes: ConfigError -> 2; DataError and its
subclasses, along with ThresholdError, EvalError, and GenerationError
-> 3; NumericError -> 4. Everything else is a plain crash.
"""


class RemexError(Exception):
    """Base class for all package errors."""


class ConfigError(RemexError):
    """Bad configuration: unknown keys, invalid values, missing sections."""


class DataError(RemexError):
    """Base for input-data problems (parse, vocabulary, validation)."""


class ParseError(DataError):
    """Malformed input file; message carries file and line context."""


class VocabularyError(DataError):
    """Unknown relation type, token, or entity identifier."""


class ValidationError(DataError):
    """Structurally parsed but semantically invalid data."""


class AvailabilityError(DataError):
    """A requested modality has no data for the query pair."""


class CheckpointError(DataError):
    """Checkpoint integrity or version failure."""


class SamplingError(DataError):
    """A sampling pool is empty or otherwise unusable."""


class TokenizeError(DataError):
    """Marker insertion failed (overlapping or out-of-range spans)."""


class NumericError(RemexError):
    """Non-finite values or numerically impossible operation."""


class ShapeError(NumericError):
    """Operand shapes incompatible; message names the op and shapes."""


class TapeStateError(RemexError):
    """Backward requested in an invalid tape state."""


class GenerationError(RemexError):
    """Synthetic-world construction could not satisfy its constraints."""


class ThresholdError(RemexError):
    """Threshold fitting is undefined (no positive examples)."""


class EvalError(RemexError):
    """Evaluation request is malformed (e.g. empty candidate set)."""
