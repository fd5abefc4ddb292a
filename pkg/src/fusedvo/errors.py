"""Exception types shared across the package."""


class FusedVOError(Exception):
    """Base class for all package errors."""


class DegenerateQuaternion(FusedVOError):
    """Quaternion norm below the representable threshold (collapsed output)."""


class NotARotation(FusedVOError):
    """Matrix is not a rotation within the accepted tolerance."""


class InvalidK(FusedVOError):
    """Temporal window length outside the supported range."""


class ShapeMismatch(FusedVOError):
    """Prediction/target shapes inconsistent with the pair spec or window."""


class EmptyBatch(FusedVOError):
    """Loss requested over zero samples."""


class MissingFile(FusedVOError):
    """Expected dataset file or directory does not exist."""


class PoseParseError(FusedVOError):
    """Pose file line or matrix has the wrong token count or bad values."""


class LengthMismatch(FusedVOError):
    """Two sequences that must be index-aligned have different lengths."""


class SequenceTooShort(FusedVOError):
    """Sequence shorter than the requested window length."""


class NonFiniteLoss(FusedVOError):
    """Training loss became NaN/Inf; carries iteration diagnostics."""

    def __init__(self, message, iteration=None, lr=None, window_ids=None):
        super().__init__(message)
        self.iteration = iteration
        self.lr = lr
        self.window_ids = window_ids


class CheckpointMismatch(FusedVOError):
    """Checkpoint config disagrees with the requested model config."""


class UnknownScene(FusedVOError):
    """Scene id not present in the registry."""


class SceneCollision(FusedVOError):
    """Scene id already registered and overwrite was not requested."""


class ConfigError(FusedVOError):
    """Bad config file content (unknown key, unparsable value)."""


class UsageError(FusedVOError):
    """Bad command line (unknown command or flag)."""
