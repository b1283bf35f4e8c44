"""Synthetic real/fake corpora and directory ingestion.

Real images are 1/f^beta Gaussian random fields with sensor noise. Fake
images come from the same field family rendered at reduced resolution,
nearest-neighbour upsampled and lightly smoothed, which leaves the
spectral-replication trace that upsampling generators are known for. Both
classes are rank-mapped per channel onto one fixed intensity marginal so
that brightness carries no label information.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy.ndimage import correlate1d
from scipy.special import ndtri

from .persist import atomic_write_text, load_png, save_png

logger = logging.getLogger(__name__)

REAL, FAKE = 0, 1
LABEL_NAMES = {REAL: "real", FAKE: "fake"}

# fixed marginal both classes are mapped onto: N(0.5, 0.15^2)
_MARGINAL_MEAN = 0.5
_MARGINAL_STD = 0.15
# channel = 0.8 * shared luminance field + 0.2 * independent field
_CHANNEL_MIX = 0.8


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    id: str

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=np.float64), 0.0, 1.0)
        if self.label not in (REAL, FAKE):
            raise ValueError(f"label must be 0 (real) or 1 (fake), got {self.label!r}")


@dataclass
class CorpusSpec:
    n_real: int = 1000
    n_fake: int = 1000
    resolution: Tuple[int, int] = (32, 32)
    seed: int = 0
    beta: float = 2.0
    sensor_noise_std: float = 2.0 / 255.0
    upsample: int = 2
    post_filter: Tuple[float, ...] = (0.05, 0.9, 0.05)

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.post_filter = tuple(float(v) for v in self.post_filter)
        if self.n_real < 1 or self.n_fake < 1:
            raise ValueError("n_real and n_fake must be >= 1")
        h, w = self.resolution
        for d in (h, w):
            if d % 8 or d % self.upsample:
                raise ValueError(f"resolution {self.resolution} must be a multiple of 8 and of {self.upsample}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["post_filter"] = list(self.post_filter)
        return d


def power_law_field(rng: np.random.Generator, h: int, w: int, beta: float) -> np.ndarray:
    """Zero-mean unit-variance Gaussian field with power spectrum ~ 1/f^beta."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fy**2 + fx**2)
    f[0, 0] = np.inf
    amp = f ** (-beta / 2.0)
    spec = amp * (rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape))
    field = np.fft.irfft2(spec, s=(h, w))
    field -= field.mean()
    return field / field.std()


def _rank_map(channel: np.ndarray) -> np.ndarray:
    flat = channel.reshape(-1)
    ranks = np.empty(flat.size)
    ranks[np.argsort(flat, kind="stable")] = np.arange(flat.size)
    q = (ranks + 0.5) / flat.size
    return (_MARGINAL_MEAN + _MARGINAL_STD * ndtri(q)).reshape(channel.shape)


def _color_field(rng, h, w, beta):
    base = power_law_field(rng, h, w, beta)
    chans = [_CHANNEL_MIX * base + (1 - _CHANNEL_MIX) * power_law_field(rng, h, w, beta) for _ in range(3)]
    return np.stack(chans)


def _rng(spec: CorpusSpec, label: int, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, label, index])


def gen_real(spec: CorpusSpec, index: int) -> LabeledImage:
    if not 0 <= index < spec.n_real:
        raise IndexError(f"real index {index} outside [0, {spec.n_real})")
    rng = _rng(spec, REAL, index)
    h, w = spec.resolution
    img = np.stack([_rank_map(c) for c in _color_field(rng, h, w, spec.beta)])
    img = img + spec.sensor_noise_std * rng.standard_normal(img.shape)
    return LabeledImage(np.clip(img, 0.0, 1.0), REAL, f"real_{spec.seed}_{index:05d}")


def gen_fake(spec: CorpusSpec, index: int) -> LabeledImage:
    if not 0 <= index < spec.n_fake:
        raise IndexError(f"fake index {index} outside [0, {spec.n_fake})")
    rng = _rng(spec, FAKE, index)
    h, w = spec.resolution
    u = spec.upsample
    small = _color_field(rng, h // u, w // u, spec.beta)
    up = small.repeat(u, axis=1).repeat(u, axis=2)
    taps = np.asarray(spec.post_filter)
    up = correlate1d(up, taps, axis=1, mode="nearest")
    up = correlate1d(up, taps, axis=2, mode="nearest")
    img = np.stack([_rank_map(c) for c in up])
    return LabeledImage(np.clip(img, 0.0, 1.0), FAKE, f"fake_{spec.seed}_{index:05d}")


def textured_test_image(resolution: Tuple[int, int] = (32, 32)) -> np.ndarray:
    """Fixed reference image (real family, seed 0, index 0) for codec and metric checks."""
    return gen_real(CorpusSpec(n_real=1, n_fake=1, resolution=resolution), 0).pixels


def generate_corpus(spec: CorpusSpec) -> List[LabeledImage]:
    """All reals then all fakes, in index order."""
    return [gen_real(spec, i) for i in range(spec.n_real)] + [gen_fake(spec, i) for i in range(spec.n_fake)]


def split_corpus(images: Sequence[LabeledImage], holdout: float = 0.2, seed: int = 0):
    """Stratified deterministic train/held-out split.

    Returns ``(train, heldout)``; both keep reals before fakes and the
    original relative order within a class.
    """
    train, held = [], []
    for label in (REAL, FAKE):
        items = [im for im in images if im.label == label]
        perm = np.random.default_rng([seed, 7919, label]).permutation(len(items))
        n_held = int(round(holdout * len(items)))
        held_idx = set(perm[:n_held].tolist())
        for i, im in enumerate(items):
            (held if i in held_idx else train).append(im)
    return train, held


def stack(images: Sequence[LabeledImage]) -> Tuple[np.ndarray, np.ndarray]:
    if not images:
        return np.zeros((0, 3, 0, 0)), np.zeros(0)
    return np.stack([im.pixels for im in images]), np.array([im.label for im in images], dtype=np.float64)


# ---------------------------------------------------------------------------
# directory ingestion / export
# ---------------------------------------------------------------------------


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: List[Tuple[str, str]] = field(default_factory=list)


def _fit(img: np.ndarray, resolution: Tuple[int, int]) -> np.ndarray:
    """Center-crop, or zero-pad, each spatial axis to ``resolution``."""
    out = img
    for axis, target in zip((1, 2), resolution):
        size = out.shape[axis]
        if size > target:
            start = (size - target) // 2
            out = np.take(out, range(start, start + target), axis=axis)
        elif size < target:
            before = (target - size) // 2
            pad = [(0, 0)] * 3
            pad[axis] = (before, target - size - before)
            out = np.pad(out, pad)
    return out


def load_dataset(path, labeling: str = "by-subdir", resolution=(32, 32), report: LoadReport = None) -> List[LabeledImage]:
    """Read PNGs labelled by ``real/``+``fake/`` subdirectories or a manifest CSV.

    Unreadable files are skipped and recorded in ``report``; an empty class
    raises ``ValueError``.
    """
    root = Path(path)
    report = report if report is not None else LoadReport()
    entries: List[Tuple[Path, int]] = []
    if labeling == "by-subdir":
        for label, sub in ((REAL, "real"), (FAKE, "fake")):
            d = root / sub
            if d.is_dir():
                entries += [(p, label) for p in d.iterdir() if p.suffix.lower() == ".png"]
    elif labeling == "by-manifest":
        manifest = root / "manifest.csv"
        if manifest.exists():
            with open(manifest, newline="") as fh:
                for row in csv.DictReader(fh):
                    lab = row["label"].strip().lower()
                    if lab not in ("real", "fake"):
                        report.skipped.append((row["filename"], f"bad label {lab!r}"))
                        continue
                    entries.append((root / row["filename"], FAKE if lab == "fake" else REAL))
    else:
        raise ValueError(f"unknown labeling {labeling!r}")

    entries.sort(key=lambda e: (e[0].name, e[1]))
    images = []
    for p, label in entries:
        try:
            pixels = load_png(p)
        except Exception as exc:  # noqa: BLE001 - any decode failure is reported, not fatal
            logger.warning("skipping %s: %s", p, exc)
            report.skipped.append((str(p), str(exc)))
            continue
        images.append(LabeledImage(_fit(pixels, tuple(resolution)), label, p.stem))
    for label in (REAL, FAKE):
        if not any(im.label == label for im in images):
            raise ValueError(f"no {LABEL_NAMES[label]} images found under {root}")
    report.loaded = len(images)
    return images


def export_dataset(images: Sequence[LabeledImage], path, manifest: bool = False) -> None:
    """Write images as 8-bit PNGs into ``real/`` and ``fake/`` (or flat + manifest.csv)."""
    root = Path(path)
    rows = []
    for im in images:
        if manifest:
            name = f"{im.id}.png"
            save_png(root / name, im.pixels)
            rows.append((name, LABEL_NAMES[im.label]))
        else:
            save_png(root / LABEL_NAMES[im.label] / f"{im.id}.png", im.pixels)
    if manifest:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["filename", "label"])
        wr.writerows(rows)
        atomic_write_text(root / "manifest.csv", buf.getvalue())
