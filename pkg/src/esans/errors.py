"""Exception hierarchy shared by all esans modules."""


class EsansError(Exception):
    """Base class for all library errors."""


class DimMismatch(EsansError):
    """Operands have incompatible dimensions."""


class ZeroNormVector(EsansError):
    """A vector with (near-)zero norm was passed where a direction is required."""


class TooFewPoints(EsansError):
    """Fewer points than requested clusters."""


class NonFiniteLoss(EsansError):
    """A loss function returned NaN or Inf."""


class InvalidArg(EsansError):
    """Argument outside its documented range."""


class ParseError(EsansError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyDataset(EsansError):
    """Input file contained no usable records."""


class MagicMismatch(EsansError):
    """Embedding file does not start with the expected magic bytes."""


class TruncatedFile(EsansError):
    """Embedding file payload shorter than its header declares."""


class ManifestMismatch(EsansError):
    """Sidecar manifest row count disagrees with the embedding file header."""


class InvalidSpec(EsansError):
    """Synthetic dataset spec violates its invariants."""


class EmptyPairs(EsansError):
    """No co-occurrence pairs available for training."""


class NoEligibleClusters(EsansError):
    """No non-empty cluster other than the positive's is available."""


class UnknownId(EsansError):
    """Id not present in the relevant vocabulary."""


class AllZeroPopularity(EsansError):
    """Popularity sampling requires at least one positive count."""


class EmptyEval(EsansError):
    """Evaluation requires at least one ground-truth pair."""


class ConfigError(EsansError):
    """Aggregated configuration validation failure."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)
