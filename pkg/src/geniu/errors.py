"""Exception types shared across the package."""


class GeniuError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(GeniuError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class NonScalarLoss(GeniuError):
    def __init__(self, shape):
        super().__init__(f"backward requires a scalar loss, got shape {shape}")


class NonFiniteValue(GeniuError):
    """NaN or Inf encountered in a gradient, loss, or activation."""

    def __init__(self, where: str):
        self.where = where
        super().__init__(f"non-finite value in {where}")


class IdxFormatError(GeniuError):
    pass


class BadMagic(IdxFormatError):
    def __init__(self, path, expected, got):
        super().__init__(f"{path}: bad IDX magic, expected {expected:#010x}, got {got:#010x}")


class TruncatedFile(IdxFormatError):
    def __init__(self, path, expected_bytes, got_bytes):
        super().__init__(f"{path}: truncated, expected {expected_bytes} bytes, got {got_bytes}")


class CountMismatch(IdxFormatError):
    def __init__(self, n_images, n_labels):
        super().__init__(f"image/label count mismatch: {n_images} images vs {n_labels} labels")


class ConfigError(GeniuError):
    pass


class ArtifactError(GeniuError):
    """A saved bundle is missing, incomplete, or inconsistent."""


class SweepCellError(GeniuError):
    """One sweep cell failed; the message names the cell, __cause__ keeps the root."""
