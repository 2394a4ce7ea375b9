"""Images, pixel clouds, grayscale equalization and palette-preserving augmentation.

Images are stored as ``(height, width, 3)`` float32 arrays in ``[0, 1]``.
Pixel clouds are ``(N, 3)`` float64 arrays of colors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import ImageIOError, ValidationError

__all__ = [
    "RgbImage",
    "PixelCloud",
    "GrayImage",
    "LUMA_WEIGHTS",
    "load_image",
    "save_image",
    "sample_pixels",
    "luma",
    "normalize_grayscale",
    "dihedral",
    "augment",
    "write_cloud_csv",
    "read_cloud_csv",
]

# BT.709
LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
_JPEG_MAGIC = b"\xff\xd8\xff"


@dataclass(frozen=True)
class RgbImage:
    data: np.ndarray
    source_id: str | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValidationError(f"expected (height, width, 3) array, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError("image has a zero dimension")
        # min/max propagate NaN, so this also rejects non-finite values without a full-size mask
        lo, hi = data.min(), data.max()
        if not (lo >= 0.0 and hi <= 1.0):
            raise ValidationError("channel values must lie in [0, 1]")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixels(self) -> np.ndarray:
        """All pixels in row-major order as an ``(N, 3)`` float64 array."""
        return self.data.reshape(-1, 3).astype(np.float64)

    def cloud(self) -> PixelCloud:
        return PixelCloud(self.pixels(), self.source_id)


@dataclass(frozen=True)
class PixelCloud:
    samples: np.ndarray
    source_id: str | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 3 or s.shape[0] < 1:
            raise ValidationError(f"pixel cloud must be (N>=1, 3), got {s.shape}")
        if not np.all(np.isfinite(s)) or s.min() < 0.0 or s.max() > 1.0:
            raise ValidationError("pixel cloud coordinates must lie in [0, 1]")
        object.__setattr__(self, "samples", s)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class GrayImage:
    intensity: np.ndarray = field(repr=False)

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


def load_image(path) -> RgbImage:
    """Decode an 8/16-bit PNG or 8-bit JPEG, scaling channels by the bit-depth maximum."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    if not (raw.startswith(_PNG_MAGIC) or raw.startswith(_JPEG_MAGIC)):
        raise ImageIOError(f"{path}: unsupported format (PNG or JPEG only)")
    arr = cv2.imdecode(np.frombuffer(raw, np.uint8), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise ImageIOError(f"{path}: failed to decode")
    if arr.size == 0:
        raise ImageIOError(f"{path}: zero-dimension image")
    if arr.dtype == np.uint8:
        maxval = 255.0
    elif arr.dtype == np.uint16:
        maxval = 65535.0
    else:
        raise ImageIOError(f"{path}: unsupported sample type {arr.dtype}")
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.shape[2] == 4:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGRA2RGB)
    elif arr.shape[2] == 3:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    else:
        raise ImageIOError(f"{path}: unsupported channel count {arr.shape[2]}")
    data = (arr.astype(np.float64) / maxval).astype(np.float32)
    return RgbImage(data, source_id=path.stem)


def save_image(img: RgbImage, path, bit_depth: int = 8) -> None:
    """Encode ``img`` as PNG, rounding to the nearest code value."""
    if bit_depth == 8:
        arr = np.rint(img.data.astype(np.float64) * 255.0).astype(np.uint8)
    elif bit_depth == 16:
        arr = np.rint(img.data.astype(np.float64) * 65535.0).astype(np.uint16)
    else:
        raise ValidationError("bit_depth must be 8 or 16")
    ok, buf = cv2.imencode(".png", cv2.cvtColor(arr, cv2.COLOR_RGB2BGR))
    if not ok:
        raise ImageIOError(f"failed to encode {path}")
    try:
        Path(path).write_bytes(buf.tobytes())
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def sample_pixels(img: RgbImage, n: int, seed: int) -> PixelCloud:
    """Draw ``n`` pixels uniformly with replacement."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    flat = img.data.reshape(-1, 3)
    idx = rng.integers(0, flat.shape[0], size=n)
    return PixelCloud(flat[idx].astype(np.float64), img.source_id)


def luma(img: RgbImage) -> np.ndarray:
    return img.data.astype(np.float64) @ LUMA_WEIGHTS


def normalize_grayscale(img: RgbImage) -> GrayImage:
    """Histogram-equalize the luma so its histogram is flat on [0, 1].

    Each pixel is replaced by its midpoint rank ``(i + 0.5) / N``; equal lumas
    are ranked by pixel index. A constant image has no usable CDF and maps to 0.5.
    """
    y = luma(img).ravel()
    n = y.size
    if np.all(y == y[0]):
        return GrayImage(np.full(img.data.shape[:2], 0.5))
    order = np.argsort(y, kind="stable")
    out = np.empty(n)
    out[order] = (np.arange(n) + 0.5) / n
    return GrayImage(out.reshape(img.data.shape[:2]))


def dihedral(img: RgbImage, index: int) -> RgbImage:
    """Apply one of the 8 symmetries of the square.

    ``index % 4`` counter-clockwise quarter turns (``np.rot90``), followed by a
    left-right flip when ``index >= 4``. Under index 1 the pixel at (row 0, col 0)
    of a 2x2 image moves to (row 1, col 0).
    """
    if not 0 <= index < 8:
        raise ValidationError("dihedral index must be in 0..7")
    data = np.rot90(img.data, k=index % 4)
    if index >= 4:
        data = data[:, ::-1]
    return RgbImage(np.ascontiguousarray(data), img.source_id)


def augment(img: RgbImage, seed: int) -> RgbImage:
    """Random reflection/rotation; the pixel multiset is unchanged."""
    index = int(np.random.default_rng(seed).integers(0, 8))
    return dihedral(img, index)


def write_cloud_csv(cloud: PixelCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "g", "b"])
        for r, g, b in cloud.samples:
            writer.writerow([f"{r:.6f}", f"{g:.6f}", f"{b:.6f}"])


def read_cloud_csv(path, source_id: str | None = None) -> PixelCloud:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return PixelCloud(data, source_id)
