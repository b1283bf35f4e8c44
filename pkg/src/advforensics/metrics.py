"""Classification, attack, image-quality and spectrum metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.ndimage import correlate1d
from scipy.stats import rankdata

from .synthdata import FAKE, REAL

PSNR_CAP = 80.0
LUMA = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class ScoredSample:
    score: float
    label: int
    id: str = ""


def _unpack(samples, labels=None) -> Tuple[np.ndarray, np.ndarray]:
    if labels is not None:
        return np.asarray(samples, dtype=np.float64).reshape(-1), np.asarray(labels).reshape(-1).astype(int)
    samples = list(samples)
    return (np.array([s.score for s in samples], dtype=np.float64),
            np.array([s.label for s in samples], dtype=int))


def accuracy_at_threshold(samples, labels=None, threshold: float = 0.5) -> float:
    """Fraction of samples where ``score >= threshold`` agrees with ``label == FAKE``."""
    s, y = _unpack(samples, labels)
    if len(s) == 0:
        raise ValueError("accuracy of an empty sample set")
    return float(np.mean((s >= threshold).astype(int) == y))


def auc_roc(samples, labels=None) -> float:
    """Mann-Whitney AUC: P(fake > real) + 0.5 P(tie), via midranks."""
    s, y = _unpack(samples, labels)
    n_f = int(np.sum(y == FAKE))
    n_r = int(np.sum(y == REAL))
    if n_f == 0 or n_r == 0:
        raise ValueError("AUC needs both real and fake samples")
    ranks = rankdata(s)  # midranks turn ties into half-counts
    u = ranks[y == FAKE].sum() - n_f * (n_f + 1) / 2.0
    return float(u / (n_f * n_r))


MIN_REALS_FOR_TPR = 20


def tpr_at_fpr(samples, labels=None, fpr_target: float = 0.05) -> float:
    """Fake detection rate at the lowest threshold whose real FPR is <= target.

    The threshold depends only on the real scores: it is the smallest
    candidate ``t`` with ``mean(real >= t) <= fpr_target``. Candidates are
    the real scores themselves plus just above the largest real score.
    """
    s, y = _unpack(samples, labels)
    real = np.sort(s[y == REAL])
    fake = s[y == FAKE]
    if len(real) < MIN_REALS_FOR_TPR:
        raise ValueError(f"need at least {MIN_REALS_FOR_TPR} real samples, got {len(real)}")
    if len(fake) == 0:
        raise ValueError("TPR needs fake samples")
    n = len(real)
    # count of reals >= real[i] is n - (first index of value real[i])
    first = np.searchsorted(real, real, side="left")
    ok = (n - first) / n <= fpr_target
    if ok.any():
        thr = real[np.argmax(ok)]
    else:
        thr = np.nextafter(real[-1], np.inf)
    return float(np.mean(fake >= thr))


def attack_success_rate(results, pre_labels=None) -> Optional[float]:
    """Fraction of correctly classified originals whose prediction flipped.

    ``results`` is a sequence of AdversarialResult (or ``(pred_before,
    pred_after)`` pairs); ``pre_labels`` holds the true labels. Returns
    ``None`` when no sample was correctly classified before the attack.
    """
    results = list(results)
    pairs = [(r.pred_before, r.pred_after) if hasattr(r, "pred_before") else tuple(r) for r in results]
    if pre_labels is None:
        pre_labels = [r.label for r in results]
    pre_labels = list(pre_labels)
    if len(pre_labels) != len(pairs):
        raise ValueError(f"{len(pairs)} results but {len(pre_labels)} labels")
    attempts = flips = 0
    for (before, after), y in zip(pairs, pre_labels):
        if before != y:
            continue
        attempts += 1
        flips += int(after != before)
    return None if attempts == 0 else flips / attempts


def asr_from_arrays(pred_before, pred_after, labels, mask=None) -> Optional[float]:
    pb, pa, y = (np.asarray(v).astype(int) for v in (pred_before, pred_after, labels))
    ok = pb == y
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    if not ok.any():
        return None
    return float(np.mean(pa[ok] != pb[ok]))


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=(0, 0))
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (3,H,W) or (H,W), got {img.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def _filt(img, w):
    # valid-mode separable filtering
    out = correlate1d(img, w, axis=0, mode="constant")
    out = correlate1d(out, w, axis=1, mode="constant")
    h = len(w) // 2
    return out[h : img.shape[0] - h, h : img.shape[1] - h]


def ssim_raw(a, b) -> float:
    """Mean local SSIM on luma, unclipped (range [-1, 1])."""
    x, y = to_luma(a), to_luma(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if np.array_equal(x, y):
        return 1.0
    w = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mx, my = _filt(x, w), _filt(y, w)
    sxx = _filt(x * x, w) - mx * mx
    syy = _filt(y * y, w) - my * my
    sxy = _filt(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    return float(np.clip(ssim_raw(a, b), 0.0, 1.0))


def feature_distance_batch(detector, a, b) -> np.ndarray:
    """Per-sample squared embedding distance divided by embedding size."""
    from .detectors import FEATURE_PROBE, embed_batch

    if detector is None or detector.family != FEATURE_PROBE:
        raise ValueError("feature distance needs a FeatureProbe detector (frozen embedding)")
    ea, eb = embed_batch(detector, a), embed_batch(detector, b)
    return np.sum((ea - eb) ** 2, axis=1) / ea.shape[1]


def feature_distance(detector, a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(feature_distance_batch(detector, a[None], b[None])[0])


@dataclass
class Spectrum:
    magnitudes: np.ndarray
    centered: bool = True
    log_scaled: bool = True
    mean_perturbation: Optional[np.ndarray] = None


def centered_spectrum(img2d: np.ndarray, log_scale: bool = True) -> np.ndarray:
    mag = np.abs(np.fft.fftshift(np.fft.fft2(img2d)))
    return np.log1p(mag) if log_scale else mag


def mean_perturbation_spectrum(originals, adversarials) -> Spectrum:
    """Spectrum of the channel-averaged mean perturbation.

    The DC bin of the centered result sits at ``(H // 2, W // 2)``.
    """
    x = np.asarray(originals, dtype=np.float64)
    a = np.asarray(adversarials, dtype=np.float64)
    if x.shape != a.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {a.shape}")
    if len(x) == 0:
        raise ValueError("no perturbations given")
    d = a - x
    if d.ndim == 4:
        d = d.mean(axis=1)
    mean = d.mean(axis=0)
    return Spectrum(centered_spectrum(mean), True, True, mean)


def radial_profile(power: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Radially averaged values of a centered 2-D array, by integer radius."""
    h, w = power.shape
    yy, xx = np.indices(power.shape)
    r = np.hypot(yy - h // 2, xx - w // 2).round().astype(int)
    sums = np.bincount(r.ravel(), power.ravel())
    counts = np.bincount(r.ravel())
    radii = np.arange(len(sums))
    keep = counts > 0
    return radii[keep], sums[keep] / counts[keep]
