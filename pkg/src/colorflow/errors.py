"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class ColorflowError(Exception):
    exit_code = 1


class ValidationError(ColorflowError, ValueError):
    exit_code = 1


class NumericalError(ColorflowError, FloatingPointError):
    exit_code = 2


class ImageIOError(ColorflowError, OSError):
    exit_code = 3


class FormatError(ImageIOError):
    """A weight file, checkpoint or manifest does not parse."""
