"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class EmptyDescriptionError(ValueError):
    """A text description is empty after normalization."""


class EmptyClassError(ValueError):
    """A class bank was asked to average zero embeddings."""


class EmptySequenceError(ValueError):
    """A temporal mean was requested over zero steps."""


class DegenerateBatchError(ValueError):
    """A training batch contains fewer than two distinct classes."""


class BankIncompleteError(KeyError):
    """A class bank is missing one or more required classes."""


class ProtocolError(ValueError):
    """An evaluation protocol precondition is violated (e.g. seen/unseen overlap)."""


class ManifestError(ValueError):
    """A dataset manifest row or its referenced files are malformed."""


class CheckpointFormatError(ValueError):
    """A checkpoint file has a bad magic number or truncated payload."""


class ConfigError(ValueError):
    """An operation received an unusable configuration (empty grid, missing variant...)."""


class DatasetSpecError(ValueError):
    """A synthetic dataset spec is unsatisfiable."""
