"""Pixel-level primitives: buffers, PNG I/O, alpha flattening, resizing, Haar DWT.

All operations are pure functions over owned numpy buffers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeError,
    InvalidArgumentError,
    InvalidFormatError,
    UnsupportedFormatError,
)

WHITE = (255, 255, 255)
_SQRT2 = np.sqrt(2.0)


@dataclass
class ImageBuffer:
    """H×W grid of 8-bit samples with 3 (RGB) or 4 (RGBA) channels."""

    data: np.ndarray  # uint8, shape (H, W, C)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.uint8:
            raise InvalidFormatError(f"expected uint8 samples, got {arr.dtype}")
        if arr.ndim != 3 or arr.shape[2] not in (3, 4):
            raise InvalidFormatError(f"expected (H, W, 3|4) samples, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def planes(self) -> np.ndarray:
        """fp64 planar view, shape (C, H, W), for numeric work."""
        return self.data.astype(np.float64).transpose(2, 0, 1)

    @classmethod
    def from_planes(cls, planes: np.ndarray) -> "ImageBuffer":
        """Round, clip to [0, 255] and repack planar fp data as 8-bit samples."""
        arr = np.clip(np.rint(np.asarray(planes, dtype=np.float64)), 0, 255)
        return cls(arr.transpose(1, 2, 0).astype(np.uint8))

    def copy(self) -> "ImageBuffer":
        return ImageBuffer(self.data.copy())


@dataclass
class SubbandSet:
    """Four half-resolution Haar subbands of a single fp64 plane."""

    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray

    def __post_init__(self):
        shapes = {self.ll.shape, self.lh.shape, self.hl.shape, self.hh.shape}
        if len(shapes) != 1:
            raise InvalidArgumentError(f"subband shapes differ: {shapes}")


def flatten_alpha(img: ImageBuffer, threshold: int = 128) -> ImageBuffer:
    """Convert RGBA to RGB: pixels with alpha strictly below `threshold` become white."""
    if img.channels != 4:
        raise InvalidFormatError(f"flatten_alpha needs RGBA input, got {img.channels} channels")
    rgb = img.data[:, :, :3].copy()
    transparent = img.data[:, :, 3] < threshold
    rgb[transparent] = WHITE
    return ImageBuffer(rgb)


def _catmull_rom(x: np.ndarray) -> np.ndarray:
    # Keys cubic kernel with a = -0.5 (Catmull-Rom).
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = 1.5 * ax3 - 2.5 * ax2 + 1.0
    far = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def _axis_taps(src: int, dst: int) -> tuple[np.ndarray, np.ndarray]:
    scale = src / dst
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    offsets = np.arange(-1, 3)
    idx = np.clip(base[:, None] + offsets[None, :], 0, src - 1)
    weights = _catmull_rom(frac[:, None] - offsets[None, :])
    return idx, weights


def resize_bicubic(img: ImageBuffer, target_w: int, target_h: int) -> ImageBuffer:
    """Separable Catmull-Rom resampling, edge-clamped, output clipped to [0, 255]."""
    if target_w < 1 or target_h < 1:
        raise InvalidArgumentError(f"target size must be >= 1, got {target_w}x{target_h}")
    arr = img.data.astype(np.float64)
    idx_h, w_h = _axis_taps(img.height, target_h)
    arr = np.einsum("ot,otwc->owc", w_h, arr[idx_h])  # rows: (H_out, W, C)
    idx_w, w_w = _axis_taps(img.width, target_w)
    arr = np.einsum("ot,hotc->hoc", w_w, arr[:, idx_w])  # cols: (H_out, W_out, C)
    return ImageBuffer(np.clip(np.rint(arr), 0, 255).astype(np.uint8))


def haar_dwt(plane: np.ndarray) -> SubbandSet:
    """Single-level orthonormal 2D Haar analysis of an even-sized fp64 plane."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise InvalidArgumentError(f"expected a 2-D plane, got shape {plane.shape}")
    h, w = plane.shape
    if h % 2 or w % 2:
        raise InvalidArgumentError(f"plane dimensions must be even, got {h}x{w}")
    lo = (plane[:, 0::2] + plane[:, 1::2]) / _SQRT2
    hi = (plane[:, 0::2] - plane[:, 1::2]) / _SQRT2
    return SubbandSet(
        ll=(lo[0::2] + lo[1::2]) / _SQRT2,
        lh=(lo[0::2] - lo[1::2]) / _SQRT2,
        hl=(hi[0::2] + hi[1::2]) / _SQRT2,
        hh=(hi[0::2] - hi[1::2]) / _SQRT2,
    )


def haar_idwt(s: SubbandSet) -> np.ndarray:
    """Exact inverse of :func:`haar_dwt` (up to fp64 rounding)."""
    h2, w2 = s.ll.shape
    lo = np.empty((2 * h2, w2))
    hi = np.empty((2 * h2, w2))
    lo[0::2] = (s.ll + s.lh) / _SQRT2
    lo[1::2] = (s.ll - s.lh) / _SQRT2
    hi[0::2] = (s.hl + s.hh) / _SQRT2
    hi[1::2] = (s.hl - s.hh) / _SQRT2
    out = np.empty((2 * h2, 2 * w2))
    out[:, 0::2] = (lo + hi) / _SQRT2
    out[:, 1::2] = (lo - hi) / _SQRT2
    return out


def read_png(path) -> ImageBuffer:
    """Read an 8-bit RGB or RGBA PNG."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in ("RGB", "RGBA"):
                raise UnsupportedFormatError(f"{path}: unsupported PNG mode {mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: not a decodable image ({exc})") from exc
    except OSError as exc:
        raise DecodeError(f"{path}: failed to decode ({exc})") from exc
    return ImageBuffer(arr)


def write_png(img: ImageBuffer, path) -> None:
    mode = "RGB" if img.channels == 3 else "RGBA"
    Image.fromarray(img.data, mode=mode).save(path, format="PNG")


def read_gray_png(path) -> np.ndarray:
    """Read an 8-bit single-channel PNG (used for stored masks)."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "L":
                raise UnsupportedFormatError(f"{path}: expected 8-bit grayscale, got {im.mode!r}")
            return np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: not a decodable image ({exc})") from exc
    except OSError as exc:
        raise DecodeError(f"{path}: failed to decode ({exc})") from exc


def write_gray_png(values: np.ndarray, path) -> None:
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        raise InvalidFormatError(f"expected uint8 mask samples, got {arr.dtype}")
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB over 8-bit samples (inf for identical buffers)."""
    if a.data.shape != b.data.shape:
        raise InvalidArgumentError(f"psnr shapes differ: {a.data.shape} vs {b.data.shape}")
    mse = np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(255.0**2 / mse))
