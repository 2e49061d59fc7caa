"""Exception hierarchy shared by every transrec module.

Four branches map onto the CLI exit codes: configuration problems,
data problems, training failures, and verification failures.
"""

from __future__ import annotations


class TransRecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TransRecError):
    """A configuration value or combination is unusable. CLI exit code 1."""


class DataError(TransRecError):
    """Input data violates a documented contract. CLI exit code 2."""


class TrainingError(TransRecError):
    """Training cannot continue. CLI exit code 3."""


class VerificationError(TransRecError):
    """A numerical verification failed. CLI exit code 4."""


# ---------------------------------------------------------------------------
# configuration


class ConfigInvalid(ConfigError):
    """A config field has an out-of-range or inconsistent value."""

    def __init__(self, field: str, detail: str):
        self.field = field
        self.detail = detail
        super().__init__(f"invalid config field {field!r}: {detail}")


class BadFraction(ConfigError):
    def __init__(self, fraction: float):
        self.fraction = fraction
        super().__init__(f"fraction must lie in (0, 1], got {fraction!r}")


class UnconfiguredModality(ConfigError):
    def __init__(self, modality: str):
        self.modality = modality
        super().__init__(f"no encoder configured for modality {modality!r}")


class MissingCheckpoint(ConfigError):
    def __init__(self, detail: str):
        super().__init__(detail)


class ConfigHashMismatch(ConfigError):
    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(
            f"checkpoint architecture hash {found} does not match the current "
            f"model ({expected}); pass --force-compat to load anyway"
        )


# ---------------------------------------------------------------------------
# data


class MalformedRecord(DataError):
    def __init__(self, path: str, line_no: int, detail: str):
        self.path = path
        self.line_no = line_no
        self.detail = detail
        super().__init__(f"{path}:{line_no}: {detail}")


class DuplicateItemId(DataError):
    def __init__(self, item_id: str, line_no: int):
        self.item_id = item_id
        self.line_no = line_no
        super().__init__(f"duplicate item id {item_id!r} at line {line_no}")


class TokenOutOfRange(DataError):
    def __init__(self, item_id: str, token: int, vocab_size: int):
        self.item_id = item_id
        self.token = token
        self.vocab_size = vocab_size
        super().__init__(
            f"item {item_id!r} has token {token} outside [0, {vocab_size})"
        )


class BadImageShape(DataError):
    def __init__(self, item_id: str, found, expected):
        self.item_id = item_id
        self.found = tuple(found)
        self.expected = tuple(expected)
        super().__init__(
            f"item {item_id!r} image shape {tuple(found)} does not match "
            f"expected {tuple(expected)}"
        )


class UnknownItemRef(DataError):
    def __init__(self, user_id: str, item_id: str):
        self.user_id = user_id
        self.item_id = item_id
        super().__init__(f"user {user_id!r} references unknown item {item_id!r}")


class EmptyDataset(DataError):
    def __init__(self, detail: str):
        super().__init__(detail)


class SequenceTooShort(DataError):
    def __init__(self, detail: str):
        super().__init__(detail)


class SequenceTooLong(DataError):
    def __init__(self, length: int, limit: int):
        self.length = length
        self.limit = limit
        super().__init__(f"sequence length {length} exceeds position table size {limit}")


class EmptyTokenList(DataError):
    def __init__(self, detail: str = "text encoder received an empty token list"):
        super().__init__(detail)


class IndexOutOfRange(DataError):
    def __init__(self, what: str, index: int, limit: int):
        self.what = what
        self.index = index
        self.limit = limit
        super().__init__(f"{what} index {index} outside [0, {limit})")


class UnknownFeature(DataError):
    def __init__(self, name: str, where: str):
        self.name = name
        super().__init__(f"{where}: feature {name!r} does not match the configured tables")


class UnencodableItem(DataError):
    def __init__(self, item_id: str, detail: str):
        self.item_id = item_id
        super().__init__(f"item {item_id!r} cannot be encoded: {detail}")


class DimMismatch(DataError):
    def __init__(self, detail: str):
        super().__init__(detail)


class MaskShapeMismatch(DataError):
    def __init__(self, found, expected):
        super().__init__(f"mask shape {tuple(found)} does not match sequence shape {tuple(expected)}")


class LabelOutOfRange(DataError):
    def __init__(self, label: int, n_classes: int):
        self.label = label
        self.n_classes = n_classes
        super().__init__(f"label {label} outside [0, {n_classes})")


class CatalogExhausted(DataError):
    def __init__(self, requested: int, available: int):
        self.requested = requested
        self.available = available
        super().__init__(
            f"cannot sample {requested} negatives: only {available} items remain "
            f"outside the user's history"
        )


class DataTooSmall(DataError):
    def __init__(self, detail: str):
        super().__init__(detail)


class EmptySplit(DataError):
    def __init__(self, split: str):
        self.split = split
        super().__init__(f"split {split!r} contains no evaluation examples")


class MismatchedReports(DataError):
    def __init__(self, field: str, a, b):
        self.field = field
        super().__init__(f"reports disagree on {field}: {a!r} vs {b!r}")


class ZeroBaseline(DataError):
    def __init__(self, metric: str):
        self.metric = metric
        super().__init__(f"baseline {metric} is zero; relative improvement undefined")


class MissingHistory(DataError):
    def __init__(self, run_dir: str):
        super().__init__(f"no epoch history found under {run_dir!r}")


class IoFailure(DataError):
    def __init__(self, path: str, detail: str):
        self.path = path
        self.detail = detail
        super().__init__(f"{path}: {detail}")


class VersionUnsupported(DataError):
    def __init__(self, path: str, version: int, supported: int):
        self.version = version
        self.supported = supported
        super().__init__(
            f"{path}: checkpoint format version {version} not supported "
            f"(this build reads version {supported})"
        )


class ShapeMismatch(DataError):
    def __init__(self, tensor: str, found, expected):
        self.tensor = tensor
        self.found = tuple(found)
        self.expected = tuple(expected)
        super().__init__(
            f"tensor {tensor!r} has shape {tuple(found)} in the checkpoint but "
            f"{tuple(expected)} in the model"
        )


# ---------------------------------------------------------------------------
# training and verification


class DivergedLoss(TrainingError):
    def __init__(self, epoch: int, step: int, detail: str):
        self.epoch = epoch
        self.step = step
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {detail}")


class ToleranceExceeded(VerificationError):
    def __init__(self, name: str, rel_err: float, tolerance: float):
        self.name = name
        self.rel_err = rel_err
        self.tolerance = tolerance
        super().__init__(
            f"gradient check failed for {name}: relative error {rel_err:.3e} "
            f"exceeds tolerance {tolerance:.1e}"
        )
