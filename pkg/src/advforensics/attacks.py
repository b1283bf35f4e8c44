"""FGSM, BIM and PGD under L-inf and L2 budgets.

All three share one iterative routine: FGSM is a single full-budget step
with no random start, BIM adds iterations of size ``relative_step * eps``,
and PGD additionally starts from a uniform draw inside the budget ball.
Attacks work on continuous [0,1] images; 8-bit quantization happens only
at export.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .detectors import Detector, input_gradient, predict_labels, score_batch
from .persist import atomic_write_text, save_png
from .synthdata import LabeledImage, stack

logger = logging.getLogger(__name__)

FGSM, BIM, PGD = "FGSM", "BIM", "PGD"
LINF, L2 = "Linf", "L2"
METHODS = (FGSM, BIM, PGD)
NORMS = (LINF, L2)

DEFAULT_STEPS = {FGSM: 1, BIM: 10, PGD: 40}
DEFAULT_RELATIVE_STEP = {FGSM: 1.0, BIM: 0.2, PGD: 1.0 / 30.0}

# budget grids; images live in [0,1]
LINF_GRID = (1 / 255, 2 / 255, 4 / 255, 8 / 255)
L2_GRID = (1.0, 2.0, 4.0, 8.0)
LINF_FINE_GRID = (1e-4, 5e-4, 1e-3, 5e-3)
L2_FINE_GRID = (0.0625, 0.125, 0.25, 0.5)

QUANT_STEP = 1.0 / 255.0
ATTACK_BATCH = 200


@dataclass(frozen=True)
class AttackConfig:
    method: str = PGD
    norm: str = LINF
    epsilon: float = 8 / 255
    steps: Optional[int] = None
    relative_step: Optional[float] = None
    random_start: Optional[bool] = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        steps = DEFAULT_STEPS[self.method] if self.steps is None else int(self.steps)
        rel = DEFAULT_RELATIVE_STEP[self.method] if self.relative_step is None else float(self.relative_step)
        if self.method == FGSM:
            steps, rel = 1, 1.0
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 < rel <= 1.0:
            raise ValueError("relative_step must lie in (0, 1]")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "relative_step", rel)
        object.__setattr__(self, "random_start", self.method == PGD)
        object.__setattr__(self, "epsilon", float(self.epsilon))

    @property
    def alpha(self) -> float:
        return self.relative_step * self.epsilon

    def to_dict(self) -> dict:
        return asdict(self)

    def tag(self) -> str:
        return f"{self.method}-{self.norm}-{self.epsilon:.6g}"


@dataclass
class AdversarialResult:
    adversarial: np.ndarray
    original_id: str
    config: AttackConfig
    success: bool
    quality: Dict[str, float] = field(default_factory=dict)
    label: Optional[int] = None
    score_before: Optional[float] = None
    score_after: Optional[float] = None
    flag: Optional[str] = None

    @property
    def pred_before(self) -> Optional[int]:
        return None if self.score_before is None else int(self.score_before >= 0.5)

    @property
    def pred_after(self) -> Optional[int]:
        return None if self.score_after is None else int(self.score_after >= 0.5)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def _flat_norm(delta: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(delta.reshape(len(delta), -1) ** 2, axis=1))


def _bcast(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def project(delta, norm: str, epsilon: float) -> np.ndarray:
    """Project a perturbation (or a batch of them) onto the eps-ball."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    d = np.asarray(delta, dtype=np.float64)
    if norm == LINF:
        return np.clip(d, -epsilon, epsilon)
    if norm != L2:
        raise ValueError(f"unknown norm {norm!r}")
    single = d.ndim <= 1
    b = d.reshape(1, -1) if single else d
    n = _flat_norm(b)
    factor = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
    out = b * _bcast(factor, b)
    return out.reshape(d.shape)


def perturbation_norm(original, adversarial, norm: str) -> float:
    d = np.asarray(adversarial, dtype=np.float64) - np.asarray(original, dtype=np.float64)
    return float(np.abs(d).max(initial=0.0)) if norm == LINF else float(np.sqrt(np.sum(d * d)))


def quantized_slack(norm: str, n_coords: int) -> float:
    """Extra budget allowed after 8-bit rounding: half a level per coordinate."""
    half = 0.5 * QUANT_STEP
    return half if norm == LINF else half * float(np.sqrt(n_coords))


def verify_constraint(original, adversarial, norm: str, epsilon: float, quantized: bool = False) -> bool:
    x = np.asarray(original, dtype=np.float64)
    a = np.asarray(adversarial, dtype=np.float64)
    if x.shape != a.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {a.shape}")
    slack = quantized_slack(norm, x.size) if quantized else 0.0
    if norm == LINF:
        bound = epsilon + slack
        # same float expressions the attack uses to clamp
        return bool(np.all(a <= x + bound) and np.all(a >= x - bound))
    return perturbation_norm(x, a, norm) <= epsilon + slack


def _enforce(x, x_adv, norm, eps):
    """Clip to [0,1] and the ball so the float-level check passes with zero slack."""
    x_adv = np.clip(x_adv, 0.0, 1.0)
    if norm == LINF:
        return np.clip(x_adv, x - eps, x + eps)
    for _ in range(8):
        over = _flat_norm(x_adv - x) > eps
        if not over.any():
            break
        shrink = np.where(over, 1.0 - 1e-12, 1.0)
        x_adv = np.clip(x + (x_adv - x) * _bcast(shrink, x), 0.0, 1.0)
    return x_adv


def random_start(shape, norm: str, epsilon: float, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Uniform draws from the eps-ball, one generator per sample."""
    n = shape[0]
    d = int(np.prod(shape[1:]))
    out = np.empty((n, d))
    for i, rng in enumerate(rngs):
        if norm == LINF:
            out[i] = rng.uniform(-epsilon, epsilon, size=d)
        else:
            v = rng.standard_normal(d)
            v /= np.linalg.norm(v)
            out[i] = v * epsilon * rng.random() ** (1.0 / d)
    return out.reshape(shape)


def _direction(grad: np.ndarray, norm: str) -> Tuple[np.ndarray, np.ndarray]:
    """Steepest-ascent direction of unit norm; also a zero-gradient mask."""
    if norm == LINF:
        flat = grad.reshape(len(grad), -1)
        return np.sign(grad), ~np.any(flat != 0, axis=1)
    n = _flat_norm(grad)
    zero = n == 0
    return grad / _bcast(np.where(zero, 1.0, n), grad), zero


GradFn = Callable[[np.ndarray], np.ndarray]


def iterate_attack(x: np.ndarray, grad_fn: GradFn, cfg: AttackConfig, rngs=None) -> Tuple[np.ndarray, np.ndarray]:
    """Projected steepest ascent on ``grad_fn`` from ``x`` (batch).

    Returns the final iterate and a mask of samples whose gradient was
    exactly zero at every step (left unchanged, flagged by callers).
    """
    x = np.asarray(x, dtype=np.float64)
    eps = cfg.epsilon
    if cfg.random_start:
        if rngs is None:
            rngs = [np.random.default_rng([cfg.seed, i]) for i in range(len(x))]
        x_adv = _enforce(x, x + project(random_start(x.shape, cfg.norm, eps, rngs), cfg.norm, eps), cfg.norm, eps)
    else:
        x_adv = x.copy()
    stuck = np.ones(len(x), dtype=bool)
    alpha = cfg.alpha
    for _ in range(cfg.steps):
        direction, zero = _direction(grad_fn(x_adv), cfg.norm)
        stuck &= zero
        delta = project(x_adv + alpha * direction - x, cfg.norm, eps)
        x_adv = _enforce(x, x + delta, cfg.norm, eps)
    return x_adv, stuck & (eps > 0)


# ---------------------------------------------------------------------------
# detector attacks
# ---------------------------------------------------------------------------


def _loss_grad_fn(det: Detector, labels):
    def fn(xb):
        return input_gradient(det, xb, labels)[1]

    return fn


def craft(det: Detector, images: np.ndarray, labels, cfg: AttackConfig, indices=None) -> Tuple[np.ndarray, np.ndarray]:
    """Batch attack returning ``(adversarials, zero_gradient_mask)``.

    ``indices`` (default ``0..N-1``) seed each sample's random start, so a
    sample's result does not depend on how the batch is split.
    """
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        return x.copy(), np.zeros(0, dtype=bool)
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    outs, flags = [], []
    for s in range(0, len(x), ATTACK_BATCH):
        sl = slice(s, s + ATTACK_BATCH)
        rngs = [np.random.default_rng([cfg.seed, int(i)]) for i in idx[sl]] if cfg.random_start else None
        a, f = iterate_attack(x[sl], _loss_grad_fn(det, y[sl]), cfg, rngs)
        outs.append(a)
        flags.append(f)
    return np.concatenate(outs), np.concatenate(flags)


def _single(det, image: LabeledImage, cfg: AttackConfig, expected: str) -> AdversarialResult:
    if cfg.method != expected:
        raise ValueError(f"{expected.lower()} called with a {cfg.method} config")
    return attack_batch(det, [image], cfg)[0]


def fgsm(det: Detector, image: LabeledImage, cfg: AttackConfig) -> AdversarialResult:
    return _single(det, image, cfg, FGSM)


def bim(det: Detector, image: LabeledImage, cfg: AttackConfig) -> AdversarialResult:
    return _single(det, image, cfg, BIM)


def pgd(det: Detector, image: LabeledImage, cfg: AttackConfig) -> AdversarialResult:
    return _single(det, image, cfg, PGD)


def attack_batch(det: Detector, images: Sequence[LabeledImage], cfg: AttackConfig,
                 reference: Optional[Detector] = None, with_quality: bool = True) -> List[AdversarialResult]:
    """Attack every image on its true label; results keep input order.

    Failures are reported per entry through ``flag`` rather than raised.
    ``reference`` is a FeatureProbe used for the feature-distance score.
    """
    from .metrics import feature_distance_batch, psnr, ssim

    if not images:
        return []
    x, y = stack(images)
    try:
        adv, stuck = craft(det, x, y, cfg)
    except Exception as exc:  # noqa: BLE001 - the batch must not abort
        logger.exception("attack failed")
        return [AdversarialResult(im.pixels.copy(), im.id, cfg, False, label=im.label, flag=f"error: {exc}")
                for im in images]
    before = score_batch(det, x)
    after = score_batch(det, adv)
    with_quality = with_quality and x.ndim == 4  # image metrics need (3,H,W) inputs
    fd = feature_distance_batch(reference, x, adv) if (with_quality and reference is not None) else None
    results = []
    for i, im in enumerate(images):
        q = {}
        if with_quality:
            q = {"psnr": psnr(x[i], adv[i]), "ssim": ssim(x[i], adv[i])}
            if fd is not None:
                q["feature_distance"] = float(fd[i])
        results.append(AdversarialResult(
            adversarial=adv[i], original_id=im.id, config=cfg,
            success=bool(predict_labels(before[i]) != predict_labels(after[i])),
            quality=q, label=im.label, score_before=float(before[i]), score_after=float(after[i]),
            flag="zero-gradient" if stuck[i] else None,
        ))
    return results


def export_result(result: AdversarialResult, original: np.ndarray, directory) -> Path:
    """Write the adversarial image as 8-bit PNG plus a JSON sidecar."""
    d = Path(directory)
    stem = f"{result.original_id}__{result.config.tag()}"
    png = d / f"{stem}.png"
    save_png(png, result.adversarial)
    cfg = result.config
    sidecar = {
        "original_id": result.original_id,
        "config": cfg.to_dict(),
        "linf": perturbation_norm(original, result.adversarial, LINF),
        "l2": perturbation_norm(original, result.adversarial, L2),
        "success": result.success,
        "score_before": result.score_before,
        "score_after": result.score_after,
        "quality": result.quality,
        "flag": result.flag,
    }
    atomic_write_text(d / f"{stem}.json", json.dumps(sidecar, indent=2, sort_keys=True))
    return png


def default_grid(seed: int = 0, fine: bool = True, coarse: bool = True) -> List[AttackConfig]:
    """Every method x norm x budget in the default sweeps."""
    configs = []
    for norm, fine_eps, coarse_eps in ((LINF, LINF_FINE_GRID, LINF_GRID), (L2, L2_FINE_GRID, L2_GRID)):
        eps = (fine_eps if fine else ()) + (coarse_eps if coarse else ())
        for method in METHODS:
            for e in eps:
                configs.append(AttackConfig(method, norm, e, seed=seed))
    return configs


def with_epsilon(cfg: AttackConfig, epsilon: float) -> AttackConfig:
    return replace(cfg, epsilon=epsilon, steps=None if cfg.method == FGSM else cfg.steps)
