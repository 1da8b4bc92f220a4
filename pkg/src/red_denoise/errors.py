"""Exception types raised across the package."""


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NotScalar(ValueError):
    """Backward was started from a tensor with more than one element."""


class LengthMismatch(ValueError):
    """A parameter/delta list does not line up with the model parameters."""


class InvalidConfig(ValueError):
    """A configuration value violates its documented constraints."""


class ImageTooSmall(ValueError):
    pass


class SizeTooSmall(ValueError):
    pass


class BadGeometry(ValueError):
    """Projection geometry is inconsistent with the image or sinogram."""


class PatchTooLarge(ValueError):
    pass


class DivergedError(RuntimeError):
    """Training produced a non-finite loss.

    Attributes:
        iteration: the iteration at which the loss became non-finite.
        checkpoint: path of the last checkpoint written before divergence, if any.
    """

    def __init__(self, message, iteration=None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint


class FormatError(ValueError):
    """Base class for malformed binary/text file contents."""


class ChecksumMismatch(FormatError):
    pass


class VersionMismatch(FormatError):
    pass
