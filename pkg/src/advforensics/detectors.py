"""Toy detector families: frozen-feature linear probe and end-to-end compact CNN."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.fft import dctn, idctn

from . import autodiff
from .autodiff import Graph, forward_eval, loss_and_grads
from .synthdata import FAKE, REAL, LabeledImage, stack

logger = logging.getLogger(__name__)

FEATURE_PROBE = "FeatureProbe"
COMPACT_CNN = "CompactCnn"
FAMILIES = (FEATURE_PROBE, COMPACT_CNN)

DEFAULT_INPUT_SHAPE = (3, 32, 32)
SCORE_BATCH = 256
PATCH = 16
PATCH_CHANNELS = 32
PATCH_CUT = 24  # keep DCT bins u+v >= 24 of 30


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class Augment:
    noise: bool = False
    flip: bool = False
    jpeg: bool = False
    noise_max_std: float = 4.0 / 255.0
    jpeg_qualities: Tuple[int, ...] = (60, 75, 90)

    @classmethod
    def from_flags(cls, flags) -> "Augment":
        if flags is None:
            return cls()
        if isinstance(flags, Augment):
            return flags
        if isinstance(flags, dict):
            return cls(**flags)
        return cls(**{f: True for f in flags})

    def active(self) -> Tuple[str, ...]:
        return tuple(f for f in ("noise", "flip", "jpeg") if getattr(self, f))


@dataclass
class Detector:
    family: str
    graph: Graph
    frozen: Set[str]
    seed: int
    input_shape: Tuple[int, int, int] = DEFAULT_INPUT_SHAPE
    threshold: float = 0.5
    metadata: Dict = field(default_factory=dict)
    name: Optional[str] = None

    score_node = "score"
    logit_node = "logit"
    loss_node = "loss"

    @property
    def trainable(self) -> Sequence[str]:
        return [n for n in self.graph.params if n not in self.frozen]

    @property
    def extractor_params(self) -> Sequence[str]:
        return [n for n in self.graph.params if n.startswith("fx.")]

    @property
    def head_params(self) -> Sequence[str]:
        return [n for n in self.graph.params if n.startswith("head.")]

    def n_trainable(self) -> int:
        return sum(self.graph.params[n].size for n in self.trainable)

    def label(self) -> str:
        return self.name or f"{self.family}-{self.seed}"

    def clone(self) -> "Detector":
        return copy.deepcopy(self)

    def header(self) -> dict:
        return {
            "family": self.family,
            "seed": self.seed,
            "input_shape": list(self.input_shape),
            "threshold": self.threshold,
            "frozen": sorted(self.frozen),
            "name": self.name,
            "metadata": self.metadata,
        }


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _conv(g, rng, x, name, out_ch, k, stride, zero_mean=False):
    c = g.shape(x)[0]
    w = _he(rng, (out_ch, c, k, k))
    if zero_mean:
        # blind to local brightness; responds to texture only
        w -= w.mean(axis=(1, 2, 3), keepdims=True)
    wid = g.param(f"{name}.w", w)
    bid = g.param(f"{name}.b", np.zeros(out_ch))
    return g.conv2d(x, wid, bid, stride=stride, padding="same" if k > 1 else "valid")


def _head(g, feats, rng=None):
    d = g.shape(feats)[0]
    w = np.zeros((1, d)) if rng is None else rng.standard_normal((1, d)) * np.sqrt(1.0 / d)
    wid = g.param("head.w", w)
    bid = g.param("head.b", np.zeros(1))
    logit = g.linear(feats, wid, bid, name="logit")
    g.sigmoid(logit, name="score")
    label = g.input("label", ())
    g.bce_with_logits(logit, label, name="loss")


def highpass_patch_filters(rng: np.random.Generator, n: int, channels: int, size: int,
                           cut: int) -> np.ndarray:
    """Random ``(n, channels, size, size)`` filters keeping only 2-D DCT bins with ``u + v >= cut``.

    Each filter is rescaled to squared norm 2 (He scaling for a relu layer).
    """
    w = rng.standard_normal((n, channels, size, size))
    c = dctn(w, axes=(-2, -1), norm="ortho")
    u = np.add.outer(np.arange(size), np.arange(size))
    c[..., u < cut] = 0.0
    w = idctn(c, axes=(-2, -1), norm="ortho")
    return w * np.sqrt(2.0 / np.sum(w * w, axis=(1, 2, 3), keepdims=True))


def build_feature_probe(seed: int, feature_dim: int = 64, input_shape=DEFAULT_INPUT_SHAPE) -> Detector:
    """Random frozen conv extractor pooled to ``feature_dim`` plus a linear head.

    The extractor is a non-overlapping 16x16 patch embedding (ViT-style
    stem) whose random filters live in the top spatial-frequency band,
    followed by a 1x1 mixing conv and global average pooling. Only the head
    (``feature_dim`` weights and one bias) is trainable.
    """
    if feature_dim < 8:
        raise ValueError("feature_dim must be >= 8")
    c, h, w = input_shape
    if h < PATCH or w < PATCH:
        raise ValueError(f"input {input_shape} smaller than the {PATCH}x{PATCH} patch")
    rng = np.random.default_rng([seed, 101])
    g = Graph()
    x = g.input("image", input_shape)
    wp = highpass_patch_filters(rng, PATCH_CHANNELS, c, PATCH, PATCH_CUT)
    h1 = g.conv2d(x, g.param("fx.patch.w", wp), g.param("fx.patch.b", np.zeros(PATCH_CHANNELS)),
                  stride=PATCH, padding="valid")
    h1 = g.relu(h1)
    h1 = g.relu(_conv(g, rng, h1, "fx.mix", feature_dim, 1, 1))
    side = g.shape(h1)
    if side[1] != side[2]:
        raise ValueError("FeatureProbe needs a square patch grid")
    h1 = g.avgpool2d(h1, side[1])
    feats = g.flatten(h1, name="features")
    target = g.input("target", (feature_dim,))
    g.sqdist(feats, target, name="embed_loss")
    _head(g, feats)
    frozen = set(n for n in g.params if n.startswith("fx."))
    return Detector(FEATURE_PROBE, g, frozen, seed, tuple(input_shape),
                    metadata={"feature_dim": feature_dim, "seed": seed})


def build_compact_cnn(seed: int, input_shape=DEFAULT_INPUT_SHAPE) -> Detector:
    """Fully trainable three-conv CNN; the first conv keeps full resolution."""
    rng = np.random.default_rng([seed, 202])
    g = Graph()
    x = g.input("image", input_shape)
    h = g.relu(_conv(g, rng, x, "cnn.conv1", 8, 3, 1, zero_mean=True))
    h = g.relu(_conv(g, rng, h, "cnn.conv2", 16, 3, 2))
    h = g.relu(_conv(g, rng, h, "cnn.conv3", 16, 3, 2))
    h = g.avgpool2d(h, g.shape(h)[1])
    feats = g.flatten(h, name="features")
    _head(g, feats, rng)
    return Detector(COMPACT_CNN, g, set(), seed, tuple(input_shape), metadata={"seed": seed})


def build_detector(family: str, seed: int, **kw) -> Detector:
    if family == FEATURE_PROBE:
        return build_feature_probe(seed, **kw)
    if family == COMPACT_CNN:
        return build_compact_cnn(seed, **kw)
    raise ValueError(f"unknown detector family {family!r}")


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def _as_batch(det: Detector, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.shape == det.input_shape:
        x = x[None]
    if x.shape[1:] != det.input_shape:
        raise ValueError(f"image shape {x.shape[1:]} does not match detector input {det.input_shape}")
    return x


def _batched(det, x, node):
    if len(x) == 0:
        return np.zeros((0,) + det.graph.shape(det.graph.node_id(node)))
    outs = []
    nid = det.graph.node_id(node)
    for i in range(0, len(x), SCORE_BATCH):
        outs.append(forward_eval(det.graph, {"image": x[i : i + SCORE_BATCH]}, outputs=[nid])[nid])
    return np.concatenate(outs)


def score_batch(det: Detector, images) -> np.ndarray:
    """Fake-probabilities for a batch ``(N, C, H, W)``.

    Every sample is computed independently, so results do not depend on
    the order or grouping of the batch.
    """
    return _batched(det, _as_batch(det, images), det.score_node).reshape(-1)


def logits_batch(det: Detector, images) -> np.ndarray:
    return _batched(det, _as_batch(det, images), det.logit_node).reshape(-1)


def score(det: Detector, image) -> float:
    x = np.asarray(image, dtype=np.float64)
    if x.shape != det.input_shape:
        raise ValueError(f"image shape {x.shape} does not match detector input {det.input_shape}")
    return float(score_batch(det, x[None])[0])


def embed_batch(det: Detector, images) -> np.ndarray:
    if det.family != FEATURE_PROBE:
        raise ValueError("only FeatureProbe detectors expose a frozen embedding")
    return _batched(det, _as_batch(det, images), "features")


def predict_label(det_or_score, image=None, threshold: float = 0.5) -> int:
    """``FAKE`` iff score >= threshold (ties go to Fake).

    Accepts either ``(detector, image)`` or a bare score.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    s = det_or_score if image is None else score(det_or_score, image)
    return FAKE if s >= threshold else REAL


def predict_labels(scores, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(scores) >= threshold).astype(int)


def loss_value(det: Detector, images, labels) -> np.ndarray:
    """Per-sample binary cross-entropy on the true labels."""
    z = logits_batch(det, images)
    y = np.asarray(labels, dtype=np.float64)
    return np.logaddexp(0.0, z) - y * z


def input_gradient(det: Detector, images, labels) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample BCE values and their gradients w.r.t. the images.

    The graph's loss is the batch mean, so gradients are rescaled by N to
    give each sample the gradient of its own loss.
    """
    x = _as_batch(det, images)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    _, _, ig, outs = loss_and_grads(det.graph, det.loss_node, {"image": x, "label": y}, inputs=["image"],
                                    outputs=[det.logit_node])
    z = outs[det.logit_node].reshape(-1)
    return np.logaddexp(0.0, z) - y * z, ig["image"] * len(x)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _augment(x: np.ndarray, aug: Augment, rng: np.random.Generator) -> np.ndarray:
    if aug.flip:
        flip = rng.random(len(x)) < 0.5
        x = x.copy()
        x[flip] = x[flip][..., ::-1]
    if aug.noise:
        std = rng.uniform(0.0, aug.noise_max_std, size=(len(x), 1, 1, 1))
        x = np.clip(x + std * rng.standard_normal(x.shape), 0.0, 1.0)
    if aug.jpeg:
        from .degrade import jpeg_roundtrip

        x = x.copy()
        apply = rng.random(len(x)) < 0.5
        qs = rng.choice(aug.jpeg_qualities, size=len(x))
        for i in np.flatnonzero(apply):
            x[i] = jpeg_roundtrip(x[i], int(qs[i]))
    return x


def train_detector(det: Detector, train: Sequence[LabeledImage], epochs: int = 20, lr: float = 0.1,
                   augment=None, seed: int = 0, batch_size: int = 32) -> Detector:
    """Minibatch SGD on the mean BCE over the trainable parameters.

    Returns a trained copy; the input detector is left untouched. Per-epoch
    mean training losses are stored in ``metadata["epoch_losses"]``.
    """
    labels = {im.label for im in train}
    if labels != {REAL, FAKE}:
        raise ValueError("training set must contain both real and fake images")
    if lr <= 0:
        raise ValueError("lr must be positive")
    out = det.clone()
    if epochs == 0:
        return out
    aug = Augment.from_flags(augment)
    x_all, y_all = stack(train)
    rng = np.random.default_rng([seed, 303])
    names = out.trainable
    params = out.graph.params
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(x_all))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            xb = _augment(x_all[idx], aug, rng) if aug.active() else x_all[idx]
            loss, pg, _ = loss_and_grads(out.graph, out.loss_node, {"image": xb, "label": y_all[idx]}, params=names)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            total += loss * len(idx)
            for n in names:
                params[n].value = params[n].value - lr * pg[n]
        history.append(total / len(order))
        logger.debug("%s epoch %d loss %.5f", out.label(), epoch, history[-1])
    out.metadata = dict(out.metadata, epochs=epochs, lr=lr, train_seed=seed, augment=list(aug.active()),
                        epoch_losses=history)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_detector(det: Detector, path, extra: Optional[dict] = None) -> None:
    header = det.header()
    if extra:
        header.update(extra)
    autodiff.save_checkpoint(path, det.graph.state_dict(), header)


def load_detector(path) -> Detector:
    header, params = autodiff.load_checkpoint(path)
    family = header["family"]
    kw = {"input_shape": tuple(header["input_shape"])}
    if family == FEATURE_PROBE:
        kw["feature_dim"] = header["metadata"]["feature_dim"]
    det = build_detector(family, header["seed"], **kw)
    det.graph.load_state_dict(params)
    det.threshold = header.get("threshold", 0.5)
    det.name = header.get("name")
    det.frozen = set(header.get("frozen", det.frozen))
    det.metadata = header.get("metadata", {})
    return det
