"""Exception types raised across the package."""


class AroLabError(Exception):
    """Base class for all package errors."""


class ShapeError(AroLabError, ValueError):
    """Operand shapes are incompatible for an operation."""


class GraphError(AroLabError, RuntimeError):
    """The computation graph is malformed (e.g. contains a cycle)."""


class WavFormatError(AroLabError, ValueError):
    """A WAV file header is malformed."""


class UnsupportedChannelsError(WavFormatError):
    """The WAV file has more than one channel."""


class UnsupportedEncodingError(WavFormatError):
    """The WAV sample encoding is neither 16-bit PCM nor 32-bit float."""


class DegenerateSilenceError(AroLabError, ValueError):
    """A peak level was requested for an all-zero signal."""


class InfiniteSNRError(AroLabError, ValueError):
    """SNR is unbounded because the perturbation has zero energy."""


class LengthMismatchError(AroLabError, ValueError):
    """A perturbation and its host clip differ in length."""


class SampleRateMismatchError(AroLabError, ValueError):
    """Audio was recorded at a rate other than the configured one."""


class ClipTooShortError(AroLabError, ValueError):
    """The clip does not contain a single analysis frame."""


class InfeasibleTargetError(AroLabError, ValueError):
    """The CTC target cannot be aligned within the available frames."""


class InstanceTooLargeError(AroLabError, ValueError):
    """Brute-force enumeration would exceed its path budget."""


class DegenerateRepresentationError(AroLabError, ValueError):
    """A pooled representation vector has zero norm."""


class NonFiniteLossError(AroLabError, RuntimeError):
    """The attack objective became NaN or infinite."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class TrainingFailureError(AroLabError, RuntimeError):
    """Training diverged or missed its quality gate."""


class CheckpointError(AroLabError, ValueError):
    """A checkpoint file is corrupt or inconsistent."""


class UnknownArchError(CheckpointError):
    """The checkpoint names an architecture tag this package does not know."""


class ManifestError(AroLabError, ValueError):
    """A corpus manifest line could not be parsed or loaded."""


class CharsetError(ManifestError):
    """A transcript contains symbols outside a-z and space."""


class EmptyReferenceError(AroLabError, ValueError):
    """An error rate was requested against an empty reference."""


class PoolExhaustedError(AroLabError, ValueError):
    """No target-pool member has a transcript differing from the source."""


class ConfigError(AroLabError, ValueError):
    """A run configuration is invalid."""
