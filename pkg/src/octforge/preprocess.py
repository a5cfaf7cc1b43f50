"""Channel-difference and spectrum inputs, crop grid, and spectral statistics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

CROP = 128
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class CropGrid:
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    @property
    def offsets(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.rows for c in self.cols]


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_rgb(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), "RGB").save(path)


def validate_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    return img


def _check_crop(crop: np.ndarray) -> np.ndarray:
    crop = validate_rgb(crop)
    if crop.shape[:2] != (CROP, CROP):
        raise ValueError(f"crop must be {CROP}x{CROP}, got {crop.shape[0]}x{crop.shape[1]}")
    return crop


def channel_differences(img: np.ndarray) -> np.ndarray:
    """(R-G, B-G, R-B) as a 3xHxW signed integer array, any size."""
    rgb = validate_rgb(img).astype(np.int16)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return np.stack([r - g, b - g, r - b])


def compute_cdi(crop: np.ndarray) -> np.ndarray:
    """3x128x128 channel difference image scaled to [-1, 1]."""
    return (channel_differences(_check_crop(crop)) / 255.0).astype(np.float32)


def luminance(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ LUMA


def dft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2-D DFT (numpy's pocketfft; exact DFT definition)."""
    return np.fft.fft2(np.asarray(x, dtype=np.float64))


def log_magnitude(gray: np.ndarray) -> np.ndarray:
    """log(1 + |DFT|) with the DC term shifted to the centre."""
    return np.fft.fftshift(np.log1p(np.abs(dft2(gray))))


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def compute_si(crop: np.ndarray) -> np.ndarray:
    """1x128x128 spectrum image in [0, 1]."""
    s = log_magnitude(luminance(_check_crop(crop)))
    return minmax(s)[None].astype(np.float32)


def average_spectrum(images: Sequence[np.ndarray], n: int | None = None) -> np.ndarray:
    """Mean of per-crop log-magnitude spectra, min-max scaled afterwards.

    Uses the first ``n`` images (all when ``n`` is None); each must be a
    128x128 crop.
    """
    if n is not None:
        if n < 1:
            raise ValueError("n must be >= 1")
        images = list(images)[:n]
    if len(images) == 0:
        raise ValueError("average_spectrum needs at least one image")
    acc = np.zeros((CROP, CROP))
    for img in images:
        acc += log_magnitude(luminance(_check_crop(img)))
    return minmax(acc / len(images))[None].astype(np.float32)


def _anchors(size: int) -> tuple[int, ...]:
    starts = list(range(0, size - CROP + 1, CROP))
    if size % CROP:
        starts.append(size - CROP)
    return tuple(starts)


def crop_parts(img: np.ndarray) -> tuple[CropGrid, list[np.ndarray]]:
    """Tile an image with 128x128 windows anchored at multiples of 128.

    When a side is not a multiple of 128 one extra window is anchored at the
    far edge; that window overlaps its neighbour.
    """
    img = validate_rgb(img)
    h, w = img.shape[:2]
    if h < CROP or w < CROP:
        raise ValueError(f"image {h}x{w} is smaller than {CROP}x{CROP}")
    grid = CropGrid(_anchors(h), _anchors(w))
    crops = [img[r : r + CROP, c : c + CROP] for r, c in grid.offsets]
    return grid, crops


def half_band_mask(h: int, w: int) -> np.ndarray:
    """True inside the centred half-band |fy| < h/4, |fx| < w/4 of an
    fftshift-ed spectrum."""
    fy = np.arange(h) - h // 2
    fx = np.arange(w) - w // 2
    return (np.abs(fy)[:, None] < h // 4) & (np.abs(fx)[None, :] < w // 4)


def hf_energy(x: np.ndarray) -> float:
    """Fraction of spectral energy outside the centred half-band.

    The mean is removed first so the statistic describes texture, not the
    overall offset of the plane.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    p = np.abs(np.fft.fftshift(np.fft.fft2(x))) ** 2
    total = p.sum()
    if total <= 0:
        return 0.0
    return float(p[~half_band_mask(*x.shape)].sum() / total)


def cdi_hf(img: np.ndarray) -> float:
    """HF energy of the R-G channel difference."""
    return hf_energy(channel_differences(img)[0])


def cdi_to_png(cdi: np.ndarray, path) -> None:
    """[-1, 1] -> [0, 255]; channels written as an RGB image."""
    arr = np.clip(np.rint((np.asarray(cdi) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), "RGB").save(Path(path))


def si_to_png(si: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(si)[0] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "L").save(Path(path))


def spectral_peak_ratio(spec: np.ndarray, row: int, col: int, half: int = 4) -> float:
    """Value at (row, col) divided by the median of its (2*half+1)^2
    neighbourhood (wrapping at the borders). Indices are into a centred
    spectrum; the centre pixel is included in the median."""
    s = np.asarray(spec)
    if s.ndim == 3:
        s = s[0]
    h, w = s.shape
    rows = (np.arange(row - half, row + half + 1)) % h
    cols = (np.arange(col - half, col + half + 1)) % w
    nb = s[np.ix_(rows, cols)]
    med = float(np.median(nb))
    val = float(s[row % h, col % w])
    if med <= 0:
        return np.inf if val > 0 else 0.0
    return val / med


def is_local_max(spec: np.ndarray, row: int, col: int) -> bool:
    s = np.asarray(spec)
    if s.ndim == 3:
        s = s[0]
    h, w = s.shape
    val = s[row % h, col % w]
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if (dr or dc) and s[(row + dr) % h, (col + dc) % w] > val:
                return False
    return True
