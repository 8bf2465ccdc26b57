"""Exception hierarchy shared across the toolkit.

Two broad families matter for the CLI exit-code contract: ValidationError
(bad input, bad configuration; exit code 1) and everything else derived from
ProvgadError (runtime failures such as missing artifacts or diverging
training; exit code 2).
"""


class ProvgadError(Exception):
    """Base class for all toolkit errors (CLI exit code 2)."""


class ValidationError(ProvgadError):
    """Invalid configuration, flags or input schema (CLI exit code 1)."""


class MalformedLineError(ValidationError):
    def __init__(self, line_no: int, n_fields: int, detail: str = ""):
        self.line_no = line_no
        self.n_fields = n_fields
        msg = f"line {line_no}: expected 6 tab-separated fields, got {n_fields}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class SchemaError(ValidationError):
    def __init__(self, key: str, detail: str = ""):
        self.key = key
        msg = f"bad record: key {key!r} missing or ill-typed"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ShapeMismatchError(ProvgadError):
    """Operand shapes incompatible; message names both graph nodes."""


class NonFiniteError(ProvgadError):
    """A NaN or infinity appeared; message names the first offending node."""


class EmptyMaskError(ProvgadError):
    """Feature reconstruction requested with an empty masked-node set."""


class DivergenceError(ProvgadError):
    """Training loss became non-finite."""


class TooFewPointsError(ProvgadError):
    """Detector fitted on fewer than k+1 points."""


class DegenerateBaselineError(ProvgadError):
    """All memorized points coincide, so the baseline distance is zero."""


class DimensionMismatchError(ProvgadError):
    """Query dimension does not match the memorized points."""


class MissingArtifactError(ProvgadError):
    """A required artifact file (vocabulary, checkpoint, snapshot) is absent."""
