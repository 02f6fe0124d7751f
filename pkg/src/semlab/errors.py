"""Exception types shared across the package."""


class SemlabError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(SemlabError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateInputError(SemlabError, ValueError):
    """An input is empty or fully masked where content is required."""


class LengthError(SemlabError, ValueError):
    """A token sequence exceeds the configured maximum length."""


class ConfigurationError(SemlabError, ValueError):
    """A config combination is infeasible or inconsistent."""


class NonFiniteError(SemlabError, FloatingPointError):
    """A loss term or gradient became NaN/inf."""


class DatasetParseError(SemlabError, ValueError):
    """A dataset file line could not be parsed."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class VocabMismatchError(SemlabError, ValueError):
    """Checkpoint and dataset vocabularies disagree."""


class ArtifactMismatchError(SemlabError, ValueError):
    """Artifacts from different runs/configs were mixed."""
