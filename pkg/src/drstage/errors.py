"""Exception types raised across the package.

Every error callers are expected to handle derives from DrstageError, so the
CLI can map the whole family onto stable exit codes.
"""


class DrstageError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(DrstageError):
    """Tensor extents disagree with what the operation requires."""


class InvalidConfig(DrstageError):
    """A hyperparameter or layer configuration is unusable (e.g. empty output)."""


class NoForeground(DrstageError):
    """No pixel exceeds the black threshold; nothing to crop."""


class DegenerateRadius(DrstageError):
    """The retina radius estimate is zero; the image cannot be rescaled."""


class DegenerateNorm(DrstageError):
    """A prediction vector has zero norm where a direction is required."""


class LabelOutOfRange(DrstageError):
    """A class label falls outside [0, k)."""


class LengthMismatch(DrstageError):
    """Paired sequences have different lengths."""


class EmptyInput(DrstageError):
    """An operation that needs at least one element received none."""


class DegenerateMarginals(DrstageError):
    """Expected accuracy equals 1; kappa is undefined."""


class EmptyDataset(DrstageError):
    """Training or validation was asked to run on zero usable samples."""


class InvalidPair(DrstageError):
    """A one-vs-one class pair is malformed (equal or out of range labels)."""


class MissingRoot(DrstageError):
    """The dataset root directory does not exist."""


class MissingClassDir(DrstageError):
    """A stage subdirectory ("0".."4") is absent from the dataset root."""

    def __init__(self, name):
        super().__init__(f"missing class directory {name!r}")
        self.name = name


class DecodeError(DrstageError):
    """An image file exists but cannot be decoded."""

    def __init__(self, path, reason=""):
        msg = f"cannot decode image {path}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.path = str(path)


class IoError(DrstageError):
    """Reading or writing a file failed at the OS level."""

    def __init__(self, path, reason=""):
        msg = f"I/O failure on {path}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.path = str(path)


class FormatError(DrstageError):
    """A model file is corrupt: bad magic, version, structure, or checksum."""
