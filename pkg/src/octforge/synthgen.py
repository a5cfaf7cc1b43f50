"""Synthetic labelled corpus with camera-like reals and upsampled fakes.

Reals: a smooth colour field plus luminance texture shared by all channels,
sampled through an RGGB Bayer mosaic with photosite noise and demosaiced
bilinearly in the colour-difference domain, so the colour channels share
their high frequencies.

Fakes: the same kind of field rendered directly at half resolution, with
texture drawn independently per channel, then upsampled 2x by one of the
families below. Upsampling replicates the spectrum and leaves the
channel-difference planes full of uncorrelated detail.

Every image is generated from its own seed (family tag, index), so corpus
generation is order-independent.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve, gaussian_filter

from .preprocess import save_rgb

FAMILIES = ("nearest", "bilinear", "checkerboard")
REAL_DOMAIN = "camera"

N_WAVES = 8
MAX_CYCLES = 10          # sinusoid frequencies in cycles per image
TEXTURE_STD = 6.0
TEXTURE_BLUR = 1.0        # texture correlation length in output pixels
SHOT_GAIN = 0.08         # photosite noise std = sqrt(gain * value)

K_GREEN = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64) / 4.0
K_BILINEAR = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 4.0
# zero insertion + box filter has position-dependent gain (1, 2, 2, 4) / 9 * 4,
# mean 1: the periodic gain is the checkerboard artifact.
K_CHECKER = np.full((3, 3), 4.0 / 9.0)


@dataclass
class SynthConfig:
    family: str = "nearest"
    base_resolution: int = 64
    output_resolution: int = 128
    count: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.output_resolution != 2 * self.base_resolution:
            raise ValueError("output_resolution must be 2 x base_resolution")
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass
class ManifestRecord:
    path: str
    label: str
    domain: str

    def row(self) -> list[str]:
        return [self.path, self.label, self.domain]


@dataclass
class Corpus:
    images: list[np.ndarray] = field(default_factory=list)
    records: list[ManifestRecord] = field(default_factory=list)


def image_rng(seed: int, tag: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode()), index])


def smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """size x size x 3 field: per-channel offset plus N_WAVES low-frequency
    sinusoids per channel. Coordinates are in units of the image side, so the
    same draw renders the same scene at any resolution."""
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    out = np.empty((size, size, 3))
    for c in range(3):
        acc = np.full((size, size), rng.uniform(70.0, 180.0))
        for _ in range(N_WAVES):
            u, v = rng.integers(-MAX_CYCLES, MAX_CYCLES + 1, size=2)
            amp = rng.uniform(2.0, 9.0)
            phase = rng.uniform(0, 2 * np.pi)
            acc += amp * np.sin(2 * np.pi * (u * xx + v * yy) + phase)
        out[..., c] = acc
    return out


def texture(rng: np.random.Generator, shape, blur: float) -> np.ndarray:
    """Gaussian-correlated noise with std TEXTURE_STD over the first two axes."""
    w = rng.normal(size=shape)
    w = gaussian_filter(w, sigma=(blur, blur) + (0,) * (len(shape) - 2), mode="wrap")
    return w * (TEXTURE_STD / w.std())


def bayer_masks(size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = np.zeros((size, size), bool)
    b = np.zeros((size, size), bool)
    r[0::2, 0::2] = True
    b[1::2, 1::2] = True
    g = ~(r | b)
    return r, g, b


def demosaic_bilinear(raw: np.ndarray) -> np.ndarray:
    """RGGB mosaic -> RGB. Green is interpolated bilinearly; red and blue are
    recovered by bilinear interpolation of their difference to green."""
    size = raw.shape[0]
    rm, gm, bm = bayer_masks(size)
    green = convolve(raw * gm, K_GREEN, mode="mirror")
    red = green + convolve((raw - green) * rm, K_BILINEAR, mode="mirror")
    blue = green + convolve((raw - green) * bm, K_BILINEAR, mode="mirror")
    return np.stack([red, green, blue], axis=-1)


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def render_real(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    scene = smooth_field(rng, size)
    scene += texture(rng, (size, size), TEXTURE_BLUR)[..., None]
    rm, gm, bm = bayer_masks(size)
    raw = scene[..., 0] * rm + scene[..., 1] * gm + scene[..., 2] * bm
    raw = np.clip(raw, 0, 255)
    raw = raw + rng.normal(size=raw.shape) * np.sqrt(SHOT_GAIN * raw)
    return _to_uint8(demosaic_bilinear(raw))


def upsample2x(img: np.ndarray, family: str) -> np.ndarray:
    """2x upsampling of an HxWx3 float image by the family kernel."""
    if family == "nearest":
        return np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
    if family not in ("bilinear", "checkerboard"):
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    h, w, _ = img.shape
    z = np.zeros((2 * h, 2 * w, 3))
    z[0::2, 0::2] = img
    k = K_BILINEAR if family == "bilinear" else K_CHECKER
    return np.stack([convolve(z[..., c], k, mode="mirror") for c in range(3)], axis=-1)


def render_fake(rng: np.random.Generator, family: str, base: int = 64) -> np.ndarray:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    scene = smooth_field(rng, base)
    scene += texture(rng, scene.shape, TEXTURE_BLUR / 2)
    return _to_uint8(upsample2x(scene, family))


def gen_real(seed: int, count: int, size: int = 128) -> Corpus:
    out = Corpus()
    for i in range(count):
        out.images.append(render_real(image_rng(seed, REAL_DOMAIN, i), size))
        out.records.append(ManifestRecord(f"{REAL_DOMAIN}/real/{i:05d}.png", "real", REAL_DOMAIN))
    return out


def gen_fake(family: str, seed: int, count: int, base: int = 64) -> Corpus:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")
    out = Corpus()
    for i in range(count):
        out.images.append(render_fake(image_rng(seed, family, i), family, base))
        out.records.append(ManifestRecord(f"{family}/fake/{i:05d}.png", "fake", family))
    return out


def write_corpus(out_dir, seed: int, count: int, families=FAMILIES) -> list[ManifestRecord]:
    """Write ``count`` reals and ``count`` fakes per family as PNGs plus
    ``manifest.csv`` (header ``path,label,domain``)."""
    out_dir = Path(out_dir)
    parts = [gen_real(seed, count)] + [gen_fake(f, seed, count) for f in families]
    records: list[ManifestRecord] = []
    for part in parts:
        for img, rec in zip(part.images, part.records):
            dst = out_dir / rec.path
            dst.parent.mkdir(parents=True, exist_ok=True)
            save_rgb(dst, img)
            records.append(rec)
    with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "domain"])
        for rec in records:
            w.writerow(rec.row())
    return records
