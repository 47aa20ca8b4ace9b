"""Exception types shared across the retalk pipeline."""


class RetalkError(Exception):
    """Base class for all retalk errors."""


# media_io
class MissingStream(RetalkError):
    """A required audio or video stream is absent."""


class DecodeFailure(RetalkError):
    """The container exists but could not be decoded."""


class UnsupportedCodec(RetalkError):
    """The stream uses a codec this build cannot read."""


class EmptyAudio(RetalkError):
    """Audio track contains no samples."""


class OutOfRange(RetalkError):
    """A requested window falls outside the available signal."""


# face_geometry
class BadWindow(RetalkError):
    """Savitzky-Golay window parameters violate parity/size constraints."""


class DegenerateAnchors(RetalkError):
    """Alignment anchors are coincident or collinear."""


class DimensionMismatch(RetalkError):
    """Coefficient/template dimensions do not agree."""


class RatioOutOfRange(RetalkError):
    """Interpolation ratio outside [0, 1]."""


# networks
class BadShape(RetalkError):
    """Tensor shape violates an operation's contract."""


class BadWindowLength(RetalkError):
    """Coefficient window length differs from the configured temporal context."""


class ShapeMismatch(RetalkError):
    """Two inputs that must share a shape do not."""


class OddChannels(RetalkError):
    """FFC input channel count must be even for the local/global split."""


class LengthMismatch(RetalkError):
    """Sequence lengths that must agree do not."""


class ZeroVector(RetalkError):
    """Both embedding norms are numerically zero."""


class BadQuality(RetalkError):
    """JPEG quality outside the accepted 10..100 range."""


# compositing
class TooManyLevels(RetalkError):
    """Pyramid depth would produce a sub-1px level."""


class NonInvertibleTransform(RetalkError):
    """Alignment transform cannot be inverted (scale ~ 0)."""


# providers / pipeline
class ProviderFailure(RetalkError):
    """An external-model provider raised or returned malformed output."""


class MissingCheckpoint(RetalkError):
    """A required stage checkpoint could not be resolved."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"missing checkpoint for stage '{stage}'" + (f": {detail}" if detail else ""))


class StageFailure(RetalkError):
    """A pipeline stage failed; carries the stage id."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed" + (f": {detail}" if detail else ""))


class DependencyMissing(RetalkError):
    """A training stage depends on a checkpoint that is not present."""


class EmptyDataset(RetalkError):
    """Dataset yields no samples."""


class DatasetEmpty(EmptyDataset):
    """Alias kept for the evaluation entry point."""


class TooFewSamples(RetalkError):
    """Not enough samples for a covariance estimate."""


class ClipTooShort(RetalkError):
    """Clip shorter than the sync metric scan requires."""
