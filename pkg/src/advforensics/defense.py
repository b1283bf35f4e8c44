"""Robust-extractor defense for FeatureProbe detectors.

The frozen extractor is fine-tuned without labels so that embeddings of
L-inf perturbed images stay close to the clean embeddings produced by the
original (pre-fine-tuning) extractor. The linear head is kept as is.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .attacks import LINF, PGD, AttackConfig, iterate_attack
from .autodiff import loss_and_grads
from .detectors import FEATURE_PROBE, Detector, embed_batch
from .synthdata import LabeledImage, stack

logger = logging.getLogger(__name__)

R2_EPSILON = 2 / 255
R4_EPSILON = 4 / 255


@dataclass(frozen=True)
class RobustFinetuneConfig:
    epsilon: float = R2_EPSILON
    inner_steps: int = 10
    inner_relative_step: float = 0.25
    outer_epochs: int = 40
    lr: float = 2e-4
    batch_size: int = 50
    seed: int = 0
    optimizer: str = "adam"
    warmup_epochs: int = 15

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("defense epsilon must be > 0")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if not 0.0 < self.inner_relative_step <= 1.0:
            raise ValueError("inner_relative_step must lie in (0, 1]")
        if self.outer_epochs < 0:
            raise ValueError("outer_epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def norm(self) -> str:
        return LINF

    def attack_config(self, epsilon: Optional[float] = None) -> AttackConfig:
        return AttackConfig(PGD, LINF, self.epsilon if epsilon is None else epsilon, steps=self.inner_steps,
                            relative_step=self.inner_relative_step, seed=self.seed)

    def epoch_epsilon(self, epoch: int) -> float:
        """Inner budget for ``epoch``: linear ramp over the warm-up epochs, then ``epsilon``."""
        if epoch >= self.warmup_epochs:
            return self.epsilon
        return self.epsilon * (epoch + 1) / (self.warmup_epochs + 1)

    def to_dict(self) -> dict:
        return asdict(self)


def _require_probe(det: Detector) -> None:
    if det.family != FEATURE_PROBE:
        raise ValueError(f"robust fine-tuning needs a FeatureProbe detector, got {det.family}")


def _embed_grad_fn(det: Detector, target: np.ndarray):
    def fn(xb):
        _, _, ig = loss_and_grads(det.graph, "embed_loss", {"image": xb, "target": target}, inputs=["image"])
        return ig["image"]

    return fn


def embed_attack(extractor: Detector, images, config: RobustFinetuneConfig, target=None,
                 epsilon: Optional[float] = None, indices=None) -> np.ndarray:
    """PGD-L-inf maximizing ``||phi(x') - target||^2`` inside the eps-ball.

    ``target`` defaults to the clean embedding ``phi(x)`` of the same
    extractor. Accepts one image ``(3,H,W)`` or a batch.
    """
    _require_probe(extractor)
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    cfg = config.attack_config(epsilon)
    if cfg.epsilon == 0:
        return (x[0] if single else x).copy()
    t = embed_batch(extractor, x) if target is None else np.asarray(target, dtype=np.float64).reshape(len(x), -1)
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    rngs = [np.random.default_rng([cfg.seed, 505, int(i)]) for i in idx]
    adv, _ = iterate_attack(x, _embed_grad_fn(extractor, t), cfg, rngs)
    return adv[0] if single else adv


def embedding_drift(detector: Detector, anchor: Detector, images, config: RobustFinetuneConfig,
                    epsilon: Optional[float] = None) -> np.ndarray:
    """Per-image ``||phi(x_adv) - phi_anchor(x)||^2`` with ``x_adv`` attacking ``detector``."""
    x = np.asarray(images, dtype=np.float64)
    target = embed_batch(anchor, x)
    adv = embed_attack(detector, x, config, target=target, epsilon=epsilon)
    return np.sum((embed_batch(detector, adv) - target) ** 2, axis=1)


class _Adam:
    """Adam update rule (Kingma and Ba defaults) keyed by parameter name."""

    def __init__(self, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, name: str, grad: np.ndarray) -> np.ndarray:
        t = self.t[name] = self.t.get(name, 0) + 1
        m = self.m[name] = self.b1 * self.m.get(name, 0.0) + (1 - self.b1) * grad
        v = self.v[name] = self.b2 * self.v.get(name, 0.0) + (1 - self.b2) * grad * grad
        mh = m / (1 - self.b1**t)
        vh = v / (1 - self.b2**t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)


def robust_finetune(detector: Detector, unlabeled_images, config: RobustFinetuneConfig) -> Detector:
    """Adversarially fine-tune the extractor of a FeatureProbe, then re-freeze it.

    ``unlabeled_images`` is an array ``(N,3,H,W)`` or a sequence of
    LabeledImage (labels are ignored). The head is not touched.
    """
    _require_probe(detector)
    out = detector.clone()
    if config.outer_epochs == 0:
        return out
    if len(unlabeled_images) and isinstance(unlabeled_images[0], LabeledImage):
        x_all = stack(unlabeled_images)[0]
    else:
        x_all = np.asarray(unlabeled_images, dtype=np.float64)
    if len(x_all) == 0:
        raise ValueError("robust fine-tuning needs at least one image")
    anchor_all = embed_batch(detector, x_all)  # frozen pre-fine-tuning target
    names = out.extractor_params
    params = out.graph.params
    rng = np.random.default_rng([config.seed, 606])
    opt = _Adam(config.lr) if config.optimizer == "adam" else None
    history = []
    for epoch in range(config.outer_epochs):
        order = rng.permutation(len(x_all))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, tb = x_all[idx], anchor_all[idx]
            # inner attack runs against a snapshot of the current extractor
            adv = embed_attack(out, xb, config, target=tb, epsilon=config.epoch_epsilon(epoch),
                               indices=idx + epoch * len(x_all))
            loss, pg, _ = loss_and_grads(out.graph, "embed_loss", {"image": adv, "target": tb}, params=names)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite defense loss at epoch {epoch}")
            total += loss * len(idx)
            for n in names:
                step = opt.step(n, pg[n]) if opt else config.lr * pg[n]
                params[n].value = params[n].value - step
        history.append(total / len(order))
        logger.debug("robust fine-tune eps=%.5f epoch %d loss %.6f", config.epsilon, epoch, history[-1])
    out.frozen = set(names)
    tag = f"R{round(config.epsilon * 255):g}"
    out.name = f"{detector.label()}-{tag}"
    out.metadata = dict(out.metadata, defense=dict(config.to_dict(), variant=tag, losses=history))
    return out
