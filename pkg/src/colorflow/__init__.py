"""Palette transfer with per-image rectified flows through the uniform color cube."""

from .errors import ColorflowError, FormatError, ImageIOError, NumericalError, ValidationError
from .flow import FlowArch, FlowWeights, integrate, train_flow, velocity
from .imagecore import PixelCloud, RgbImage, load_image, sample_pixels, save_image
from .transfer import TransferConfig, TransferJob, transfer_cloud, transfer_image

__version__ = "0.1.0"

__all__ = [
    "ColorflowError",
    "FormatError",
    "ImageIOError",
    "NumericalError",
    "ValidationError",
    "FlowArch",
    "FlowWeights",
    "integrate",
    "train_flow",
    "velocity",
    "PixelCloud",
    "RgbImage",
    "load_image",
    "sample_pixels",
    "save_image",
    "TransferConfig",
    "TransferJob",
    "transfer_cloud",
    "transfer_image",
]
