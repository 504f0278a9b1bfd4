class HandSdfException(Exception):
    """Base error for every failure raised by the toolkit."""

    exit_code = 2


class InvalidInputError(HandSdfException, ValueError):
    """Input is non-finite, out of range or otherwise violates a precondition."""


class InvalidCameraError(InvalidInputError):
    """Camera parameters cannot describe a valid perspective rig."""


class BehindCameraError(InvalidInputError):
    """A projected point ends up at or behind the camera plane."""


class ShapeMismatchError(InvalidInputError):
    """Array widths or parameter shapes do not line up."""


class FormatError(InvalidInputError):
    """A binary or text artifact does not follow its documented layout."""


class CheckpointMismatchError(InvalidInputError):
    """Checkpoint header is incompatible with the scene it is applied to."""


class StaleCacheError(HandSdfException):
    """Backward pass was requested with a cache from a different network."""


class TrainingDivergedError(HandSdfException):
    """Loss or parameters became non-finite; the step was rolled back."""

    exit_code = 3


class PlacementError(HandSdfException):
    """Object could not be placed against the hand on this attempt."""


class SceneGenerationError(HandSdfException):
    """Scene generation gave up after its bounded retries."""


class EmptyReconstructionError(HandSdfException):
    """The decoded field has no zero crossing inside the extraction bounds."""

    exit_code = 1
