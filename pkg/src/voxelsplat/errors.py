"""Exception hierarchy shared across the package.

Every error raised by library code derives from :class:`VoxelSplatError`
so callers can catch the whole family with one clause; the CLI maps each
class name to a machine-readable error record.
"""


class VoxelSplatError(Exception):
    """Base class for all package errors."""


class ValidationError(VoxelSplatError):
    """A domain object violates one of its declared invariants."""


class NonFiniteError(ValidationError):
    """NaN or infinity where a finite value is required."""


class NonPositiveScaleError(ValidationError):
    """A Gaussian scale component is zero or negative."""


class OutOfRangeOpacityError(ValidationError):
    """Opacity outside the unit interval."""


class OutOfRangeTimestampError(ValidationError):
    """Timestamp outside the unit interval."""


class DimensionMismatchError(VoxelSplatError):
    """Array dimensions incompatible with the declared layout."""


class ShapeMismatchError(VoxelSplatError):
    """Two array arguments disagree in shape."""


class InvalidDepthError(VoxelSplatError):
    """Depth value that cannot be unprojected (non-positive or non-finite)."""


class MissingGaussianMapError(VoxelSplatError):
    """FrameObservation lacks the per-pixel attribute map."""


class EmptyInputError(VoxelSplatError):
    """An operation received an empty collection it cannot act on."""


class EmptyTrackError(VoxelSplatError):
    """Dynamic track with no keyframes."""


class NonPositiveRhoError(VoxelSplatError):
    """Voxel side length must be strictly positive."""


class EmptyVoxelError(VoxelSplatError):
    """Softmax over an empty logit list."""


class DegenerateQuaternionSumError(VoxelSplatError):
    """Weighted quaternion sum too close to zero to normalize."""


class QueryFrameAbsentError(VoxelSplatError):
    """No context frame carries the requested query timestamp."""


class EmptyValidSetError(VoxelSplatError):
    """A masked reduction has no valid pixels."""


class NonFiniteComponentError(VoxelSplatError):
    """A loss component is NaN or infinite."""


class ImageTooSmallError(VoxelSplatError):
    """Image smaller than the metric's window."""


class NoMatchedVoxelsError(VoxelSplatError):
    """Fused output and ground truth share no voxel ids."""


class NonFiniteObjectiveError(VoxelSplatError):
    """Objective evaluated to NaN or infinity during differentiation."""


class DivergedLossError(VoxelSplatError):
    """Training loss became non-finite."""


class BadConfigError(VoxelSplatError):
    """Invalid synthetic-scene or training configuration."""


class MalformedHeaderError(VoxelSplatError):
    """Unparseable file header."""


class UnsupportedPropertyError(VoxelSplatError):
    """PLY file is missing a required property or stores it with an unusable type."""


class MissingFileError(VoxelSplatError):
    """A file referenced by a manifest does not exist."""


class BadTimestampsError(VoxelSplatError):
    """Manifest timestamps are not strictly increasing."""
