"""Exception types shared across the toolkit.

Every failure mode callers are expected to branch on gets its own class;
generic misuse stays on ValueError/TypeError.
"""


class IdKitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(IdKitError, ValueError):
    """Tensor shapes are inconsistent. Message names both offending dims."""


class NumericsError(IdKitError, FloatingPointError):
    """NaN or Inf encountered where finite values are required."""


class ConfigurationError(IdKitError):
    """Components were wired together inconsistently."""


class FeatureBackendError(IdKitError):
    """An image feature extractor failed; carries the source id."""

    def __init__(self, message: str, source_id: str = "unknown"):
        super().__init__(f"{message} (source_id={source_id})")
        self.source_id = source_id


class CheckpointError(IdKitError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class SkipRecordError(IdKitError):
    """A source video cannot produce a dataset record; caller logs and drops."""


class EmptyPoolError(SkipRecordError):
    """No usable single-face frame was found within the attempt budget."""


class DetectorError(IdKitError):
    """Face detector backend failed; carries the frame index."""

    def __init__(self, message: str, frame_index: int):
        super().__init__(f"{message} (frame_index={frame_index})")
        self.frame_index = frame_index


class ManifestError(IdKitError):
    """Manifest file is malformed; message names the offending line."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CaptionClientError(IdKitError):
    """A captioning backend call failed after exhausting retries."""


class CaptionContentError(CaptionClientError):
    """A captioning backend returned unusable content (e.g. empty text)."""


class NonFiniteLossError(IdKitError):
    """Training loss came out NaN/Inf; the step was aborted."""
