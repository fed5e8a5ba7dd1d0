"""Fundus image preprocessing pipeline.

The pipeline crops away the black camera border, normalizes the retina
radius, subtracts a Gaussian local average to flatten illumination, masks a
circle around the retina to drop the bright rim, and crops again:

    crop -> resize 512x512 -> radius scale -> local-average subtract
         -> circular mask -> crop

All operations work on 8-bit RGB rasters and are deterministic. The bounding
box deliberately uses an exclusive max index, dropping the last bright
row/column, to stay bit-faithful to the published procedure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, DegenerateRadius, InvalidConfig, IoError, NoForeground

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601 luma on RGB


@dataclass
class RasterImage:
    """8-bit-per-channel RGB pixel grid, row-major."""

    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidConfig(f"raster must be (h, w, 3), got {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise InvalidConfig(f"raster must be uint8, got {self.pixels.dtype}")
        if self.height < 1 or self.width < 1:
            raise InvalidConfig("raster extents must be >= 1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class PreprocessConfig:
    scale: float = 300.0          # target retina radius in pixels
    black_threshold: int = 50     # grayscale cutoff for "background"
    mask_fraction: float = 0.9    # keep this fraction of the scaled radius
    intermediate_size: int = 512  # square edge after the first crop
    fill_value: int = 128         # flat-field baseline inside the mask

    def __post_init__(self):
        if not 0.0 < self.mask_fraction <= 1.0:
            raise InvalidConfig(f"mask_fraction must be in (0, 1], got {self.mask_fraction}")
        if self.scale < 1:
            raise InvalidConfig(f"scale must be >= 1, got {self.scale}")
        if not 0 <= self.black_threshold <= 255:
            raise InvalidConfig(f"black_threshold must be in [0, 255], got {self.black_threshold}")
        if self.intermediate_size < 1:
            raise InvalidConfig("intermediate_size must be >= 1")


def _round_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0.0, 255.0).astype(np.uint8)


def read_image(path) -> RasterImage:
    """Decode a PNG or JPEG file into an RGB raster."""
    try:
        with Image.open(path) as im:
            return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except FileNotFoundError as exc:
        raise IoError(path, str(exc)) from exc
    except UnidentifiedImageError as exc:
        raise DecodeError(path, str(exc)) from exc
    except OSError as exc:
        raise DecodeError(path, str(exc)) from exc


def write_png(img: RasterImage, path) -> None:
    """Write an 8-bit RGB PNG (never interlaced)."""
    try:
        Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise IoError(path, str(exc)) from exc


def to_grayscale(img: RasterImage) -> np.ndarray:
    """(h, w) uint8 luma: round(0.299 R + 0.587 G + 0.114 B)."""
    rgb = img.pixels.astype(np.float64)
    gray = rgb[..., 0] * GRAY_WEIGHTS[0] + rgb[..., 1] * GRAY_WEIGHTS[1] + rgb[..., 2] * GRAY_WEIGHTS[2]
    return _round_u8(gray)


def crop_nonblack(img: RasterImage, threshold: int) -> RasterImage:
    """Crop to the bounding box of pixels whose luma strictly exceeds threshold.

    The max row/column index is exclusive, so the last bright row and column
    are dropped (source-procedure quirk, kept for fidelity).
    """
    gray = to_grayscale(img)
    rows = np.flatnonzero((gray > threshold).any(axis=1))
    cols = np.flatnonzero((gray > threshold).any(axis=0))
    if rows.size == 0:
        raise NoForeground(f"no pixel above threshold {threshold}")
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    if r1 <= r0 or c1 <= c0:
        raise NoForeground("foreground bounding box is degenerate under exclusive-max slicing")
    return RasterImage(img.pixels[r0:r1, c0:c1].copy())


def estimate_radius(img: RasterImage) -> float:
    """Half the count of bright columns along the middle row.

    Brightness is the channel sum; a column counts when it exceeds a tenth of
    the row mean.
    """
    row = img.pixels[img.height // 2, :, :].astype(np.float64).sum(axis=1)
    bright = int((row > row.mean() / 10.0).sum())
    if bright == 0:
        raise DegenerateRadius("middle row has no column above a tenth of its mean")
    return bright / 2.0


def scale_radius(img: RasterImage, scale: float) -> RasterImage:
    """Uniform bilinear resize so the estimated retina radius becomes `scale`."""
    r = estimate_radius(img)
    s = scale / r
    out_w = max(1, int(np.floor(img.width * s + 0.5)))
    out_h = max(1, int(np.floor(img.height * s + 0.5)))
    return resize_bilinear(img, out_w, out_h)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(taps ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def _mirror_indices(n: int, radius: int) -> np.ndarray:
    # reflect about edge pixel centers without duplicating the edge
    idx = np.arange(-radius, n + radius)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def gaussian_blur(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian on a float (h, w) plane, mirrored borders."""
    if sigma <= 0:
        return channel.copy()
    kernel = _gaussian_kernel(sigma)
    radius = (kernel.size - 1) // 2

    def convolve_rows(plane):
        h, w = plane.shape
        padded = plane[:, _mirror_indices(w, radius)]
        out = np.zeros_like(plane)
        for t in range(kernel.size):
            out += kernel[t] * padded[:, t : t + w]
        return out

    blurred = convolve_rows(channel)
    return convolve_rows(blurred.T).T


def subtract_local_average(img: RasterImage, scale: float) -> RasterImage:
    """Flatten illumination: clamp(4*img - 4*blur(img, scale/30) + 128)."""
    sigma = scale / 30.0
    rgb = img.pixels.astype(np.float64)
    out = np.empty_like(rgb)
    for c in range(3):
        out[..., c] = 4.0 * rgb[..., c] - 4.0 * gaussian_blur(rgb[..., c], sigma) + 128.0
    return RasterImage(_round_u8(out))


def circular_mask(img: RasterImage, scale: float, fraction: float) -> RasterImage:
    """Zero every pixel farther than floor(scale * fraction) from the center."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidConfig(f"fraction must be in (0, 1], got {fraction}")
    radius = int(scale * fraction)
    cy, cx = img.height // 2, img.width // 2
    yy = (np.arange(img.height) - cy) ** 2
    xx = (np.arange(img.width) - cx) ** 2
    outside = yy[:, None] + xx[None, :] > radius * radius
    pixels = img.pixels.copy()
    pixels[outside] = 0
    return RasterImage(pixels)


def resize_bilinear(img: RasterImage, out_w: int, out_h: int) -> RasterImage:
    """Bilinear resample with half-pixel-centered sampling."""
    if out_w < 1 or out_h < 1:
        raise InvalidConfig(f"output extents must be >= 1, got {out_w}x{out_h}")
    if out_w == img.width and out_h == img.height:
        return RasterImage(img.pixels.copy())
    src = img.pixels.astype(np.float64)
    h, w = img.height, img.width

    def axis_coords(out_n, in_n):
        coords = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        coords = np.clip(coords, 0.0, in_n - 1.0)
        lo = np.floor(coords).astype(np.intp)
        lo = np.minimum(lo, in_n - 2) if in_n > 1 else lo
        frac = coords - lo
        return lo, frac

    if h > 1:
        ylo, yfrac = axis_coords(out_h, h)
    else:
        ylo, yfrac = np.zeros(out_h, dtype=np.intp), np.zeros(out_h)
    if w > 1:
        xlo, xfrac = axis_coords(out_w, w)
    else:
        xlo, xfrac = np.zeros(out_w, dtype=np.intp), np.zeros(out_w)

    yhi = np.minimum(ylo + 1, h - 1)
    xhi = np.minimum(xlo + 1, w - 1)
    yfrac = yfrac[:, None, None]
    xfrac = xfrac[None, :, None]

    top = src[ylo][:, xlo] * (1 - xfrac) + src[ylo][:, xhi] * xfrac
    bottom = src[yhi][:, xlo] * (1 - xfrac) + src[yhi][:, xhi] * xfrac
    return RasterImage(_round_u8(top * (1 - yfrac) + bottom * yfrac))


def preprocess_fundus(img: RasterImage, cfg: PreprocessConfig | None = None) -> RasterImage:
    """Full pipeline; raises NoForeground/DegenerateRadius on unusable input."""
    cfg = cfg or PreprocessConfig()
    out = crop_nonblack(img, cfg.black_threshold)
    out = resize_bilinear(out, cfg.intermediate_size, cfg.intermediate_size)
    out = scale_radius(out, cfg.scale)
    out = subtract_local_average(out, cfg.scale)
    out = circular_mask(out, cfg.scale, cfg.mask_fraction)
    return crop_nonblack(out, cfg.black_threshold)
