"""Post-upload degradations: baseline JPEG round-trip, Gaussian blur, additive noise."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import correlate1d

IDENTITY, JPEG, BLUR, NOISE = "Identity", "Jpeg", "Blur", "Noise"
KINDS = (IDENTITY, JPEG, BLUR, NOISE)

JPEG_GRID = (90, 60, 30)
BLUR_GRID = tuple(0.01 * 2**n for n in range(1, 11))
NOISE_GRID = tuple(range(0, 7))

# ITU-T T.81 Annex K tables, row-major
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.full((8, 8), 99.0)
CHROMA_TABLE[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]


def quality_scale(quality: int) -> int:
    """libjpeg quality -> percentage scale factor."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must lie in [1, 100], got {quality}")
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def scaled_table(base: np.ndarray, quality: int) -> np.ndarray:
    s = quality_scale(quality)
    return np.clip(np.floor((base * s + 50) / 100), 1, 255)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """JFIF full-range conversion on 0..255 values, channel axis -3."""
    r, g, b = rgb[..., 0, :, :], rgb[..., 1, :, :], rgb[..., 2, :, :]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-3)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0, :, :], ycc[..., 1, :, :] - 128.0, ycc[..., 2, :, :] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-3)


def jpeg_roundtrip(image, quality: int) -> np.ndarray:
    """Baseline 4:4:4 JPEG encode/decode of a ``(3,H,W)`` or ``(N,3,H,W)`` image.

    Entropy coding is lossless and skipped; the output is the decoder's
    reconstruction before 8-bit rounding, clipped to [0,1].
    """
    tables = np.stack([scaled_table(LUMA_TABLE, quality)] + [scaled_table(CHROMA_TABLE, quality)] * 2)
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1] != 3:
        raise ValueError("JPEG round-trip expects 3-channel images")
    n, _, h, w = x.shape
    ph, pw = -h % 8, -w % 8
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = h + ph, w + pw
    ycc = rgb_to_ycbcr(xp * 255.0) - 128.0
    blocks = ycc.reshape(n, 3, H // 8, 8, W // 8, 8).transpose(0, 1, 2, 4, 3, 5)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    q = tables[None, :, None, None]
    coef = np.round(coef / q) * q
    rec = idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 1, 2, 4, 3, 5).reshape(n, 3, H, W) + 128.0
    out = np.clip(ycbcr_to_rgb(rec) / 255.0, 0.0, 1.0)[:, :, :h, :w]
    return out[0] if single else out


def kernel_size_for_sigma(sigma: float) -> int:
    """Blur kernel side length for ``sigma``; 0 means no blur."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return 0
    if sigma <= 1:
        return 3
    if sigma <= 2:
        return 5
    return 7


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    k = kernel_size_for_sigma(sigma)
    r = np.arange(k) - k // 2
    w = np.exp(-(r**2) / (2.0 * sigma**2))
    return w / w.sum()


def gaussian_blur(image, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with edge replication."""
    x = np.asarray(image, dtype=np.float64)
    if kernel_size_for_sigma(sigma) == 0:
        return x.copy()
    w = gaussian_kernel1d(sigma)
    out = correlate1d(x, w, axis=-2, mode="nearest")
    out = correlate1d(out, w, axis=-1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def noise_std(level_i: int) -> float:
    if level_i < 0:
        raise ValueError("noise level must be >= 0")
    return 2.0**level_i / 255.0


def additive_noise(image, level_i: int, seed: int) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng([seed, 404])
    return np.clip(x + noise_std(level_i) * rng.standard_normal(x.shape), 0.0, 1.0)


@dataclass(frozen=True)
class DegradationConfig:
    kind: str = IDENTITY
    jpeg_quality: int = 90
    blur_sigma: float = 0.0
    noise_level_i: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}")
        if self.kind == JPEG:
            quality_scale(self.jpeg_quality)
        if self.kind == BLUR:
            kernel_size_for_sigma(self.blur_sigma)
        if self.kind == NOISE:
            noise_std(self.noise_level_i)

    @property
    def level(self) -> Optional[float]:
        return {IDENTITY: None, JPEG: self.jpeg_quality, BLUR: self.blur_sigma, NOISE: self.noise_level_i}[self.kind]

    def tag(self) -> str:
        return self.kind if self.kind == IDENTITY else f"{self.kind}-{self.level:g}"

    def to_dict(self) -> dict:
        return asdict(self)


def apply_degradation(images, cfg: DegradationConfig, indices=None) -> np.ndarray:
    """Apply ``cfg`` to a batch ``(N,3,H,W)``.

    Noise is drawn per image from ``(cfg.seed, index)`` so a sample's noise
    does not depend on its batch neighbours.
    """
    x = np.asarray(images, dtype=np.float64)
    if cfg.kind == IDENTITY:
        return x.copy()
    if cfg.kind == JPEG:
        return jpeg_roundtrip(x, cfg.jpeg_quality)
    if cfg.kind == BLUR:
        return gaussian_blur(x, cfg.blur_sigma)
    idx = range(len(x)) if indices is None else indices
    return np.stack([additive_noise(x[k], cfg.noise_level_i, cfg.seed * 1_000_003 + int(i)) for k, i in enumerate(idx)])


def default_grid(seed: int = 0) -> List[DegradationConfig]:
    grid = [DegradationConfig(IDENTITY)]
    grid += [DegradationConfig(JPEG, jpeg_quality=q) for q in JPEG_GRID]
    grid += [DegradationConfig(BLUR, blur_sigma=s) for s in BLUR_GRID]
    grid += [DegradationConfig(NOISE, noise_level_i=i, seed=seed) for i in NOISE_GRID]
    return grid
