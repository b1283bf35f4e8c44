"""Experiment pipelines: benign, white-box, transfer, degradation and defense.

Every pipeline is a pure function of an :class:`ExperimentConfig`. Trained
detectors and crafted adversarials are memoised per process in a
:class:`Context`, so pipelines that share a quantity (clean AUC, the
white-box diagonal of a transfer matrix) report the identical number.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .attacks import FGSM, BIM, PGD, LINF, L2, LINF_GRID, AttackConfig, craft
from .attacks import default_grid as default_attack_grid
from .defense import R2_EPSILON, R4_EPSILON, RobustFinetuneConfig, robust_finetune
from .degrade import IDENTITY, DegradationConfig, apply_degradation
from .degrade import default_grid as default_degradation_grid
from .detectors import (COMPACT_CNN, FEATURE_PROBE, Augment, Detector, build_detector, load_detector,
                        predict_labels, save_detector, score_batch, train_detector)
from .metrics import (auc_roc, feature_distance_batch, mean_perturbation_spectrum, psnr, ssim, tpr_at_fpr)
from .persist import atomic_write_text, save_pgm16
from .synthdata import FAKE, REAL, CorpusSpec, generate_corpus, load_dataset, split_corpus, stack

logger = logging.getLogger(__name__)

SEED_KEYS = ("corpus", "split", "train", "attack", "noise", "defense")
TRAIN_LR = {FEATURE_PROBE: 2.0, COMPACT_CNN: 0.1}
AGGREGATION_NOTE = ("metrics are per-detector means over the held-out evaluation set; attacked sets contain "
                    "attacked reals and attacked fakes; transfer averages exclude the diagonal")


class PipelineError(RuntimeError):
    """Raised for invalid configurations or unusable output locations."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class DetectorSpec:
    family: str
    seed: int
    checkpoint: Optional[str] = None
    train_fresh: bool = True
    epochs: int = 20
    lr: Optional[float] = None
    batch_size: int = 32
    augment: Tuple[str, ...] = ()

    def label(self) -> str:
        return f"{self.family}-{self.seed}"

    def learning_rate(self) -> float:
        return TRAIN_LR[self.family] if self.lr is None else float(self.lr)


def default_detectors() -> List[DetectorSpec]:
    return [DetectorSpec(FEATURE_PROBE, 0), DetectorSpec(FEATURE_PROBE, 1),
            DetectorSpec(COMPACT_CNN, 0), DetectorSpec(COMPACT_CNN, 1)]


def default_transfer_attacks() -> List[dict]:
    return [{"method": m, "norm": n, "epsilon": e} for n, e in ((LINF, 8 / 255), (L2, 8.0)) for m in (FGSM, BIM, PGD)]


def default_defense_attacks() -> List[dict]:
    return [{"method": m, "norm": LINF, "epsilon": e} for m in (FGSM, BIM, PGD) for e in LINF_GRID]


def default_defense() -> List[dict]:
    return [{"epsilon": R2_EPSILON}, {"epsilon": R4_EPSILON}]


@dataclass
class ExperimentConfig:
    """One-file description of a run. ``None`` grids mean "use the default grid"."""

    corpus: dict = field(default_factory=dict)
    dataset_path: Optional[str] = None
    dataset_labeling: str = "by-subdir"
    holdout: float = 0.2
    detectors: List[DetectorSpec] = field(default_factory=default_detectors)
    attacks: Optional[List[dict]] = None
    transfer_attacks: Optional[List[dict]] = None
    degradations: Optional[List[dict]] = None
    degradation_attack: dict = field(default_factory=lambda: {"method": PGD, "norm": LINF, "epsilon": 8 / 255})
    attacker_pre_degradation: Optional[dict] = None
    defense: Optional[List[dict]] = None
    defense_attacks: Optional[List[dict]] = None
    defense_detector: Optional[str] = None
    spectrum_attack: dict = field(default_factory=lambda: {"method": PGD, "norm": LINF, "epsilon": 4 / 255})
    eval_limit: Optional[int] = None
    output_dir: str = "out"
    global_seed: int = 0
    seeds: Dict[str, int] = field(default_factory=dict)

    # -- seeds -----------------------------------------------------------

    def seed(self, key: str) -> int:
        if key not in SEED_KEYS:
            raise KeyError(key)
        return int(self.seeds.get(key, self.global_seed))

    def resolved_seeds(self) -> Dict[str, int]:
        return {k: self.seed(k) for k in SEED_KEYS}

    # -- grids -----------------------------------------------------------

    def corpus_spec(self) -> CorpusSpec:
        kw = dict(self.corpus)
        kw.setdefault("seed", self.seed("corpus"))
        return CorpusSpec(**kw)

    def _attack(self, d: dict) -> AttackConfig:
        d = dict(d)
        d.setdefault("seed", self.seed("attack"))
        return AttackConfig(**d)

    def attack_grid(self) -> List[AttackConfig]:
        if self.attacks is None:
            return default_attack_grid(seed=self.seed("attack"))
        return [self._attack(d) for d in self.attacks]

    def transfer_grid(self) -> List[AttackConfig]:
        return [self._attack(d) for d in (self.transfer_attacks or default_transfer_attacks())]

    def defense_attack_grid(self) -> List[AttackConfig]:
        return [self._attack(d) for d in (self.defense_attacks or default_defense_attacks())]

    def degradation_grid(self) -> List[DegradationConfig]:
        if self.degradations is None:
            return default_degradation_grid(seed=self.seed("noise"))
        out = []
        for d in self.degradations:
            d = dict(d)
            d.setdefault("seed", self.seed("noise"))
            out.append(DegradationConfig(**d))
        return out

    def defense_configs(self) -> List[RobustFinetuneConfig]:
        out = []
        for d in (self.defense if self.defense is not None else default_defense()):
            d = dict(d)
            d.setdefault("seed", self.seed("defense"))
            out.append(RobustFinetuneConfig(**d))
        return out

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["detectors"] = [dict(asdict(s), augment=list(s.augment)) for s in self.detectors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PipelineError(f"unknown config fields: {sorted(unknown)}")
        if "detectors" in d:
            d["detectors"] = [s if isinstance(s, DetectorSpec) else
                              DetectorSpec(**dict(s, augment=tuple(s.get("augment", ())))) for s in d["detectors"]]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def content_hash(self) -> str:
        """SHA-256 of the canonical config, excluding where outputs go."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        if not self.detectors:
            raise PipelineError("config lists no detectors")
        labels = [s.label() for s in self.detectors]
        if len(set(labels)) != len(labels):
            raise PipelineError(f"duplicate detectors: {labels}")
        for s in self.detectors:
            if s.family not in (FEATURE_PROBE, COMPACT_CNN):
                raise PipelineError(f"unknown detector family {s.family!r}")
            if not s.train_fresh and (s.checkpoint is None or not Path(s.checkpoint).is_file()):
                raise PipelineError(f"checkpoint for {s.label()} missing and train_fresh is off")
        if not 0.0 < self.holdout < 1.0:
            raise PipelineError("holdout must lie in (0, 1)")
        self.attack_grid()
        self.transfer_grid()
        self.degradation_grid()
        self.defense_configs()


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

COLUMNS = ("pipeline", "regime", "detector", "role", "source", "target", "variant", "attack", "norm",
           "epsilon", "degradation", "split", "n", "accuracy", "auc", "tpr_at_5fpr", "asr",
           "asr_fake_to_real", "psnr", "ssim", "feature_distance", "zero_gradient")
UNIT_RANGE = ("accuracy", "auc", "tpr_at_5fpr", "asr", "asr_fake_to_real", "ssim")


def _row(**kw) -> dict:
    row = {c: None for c in COLUMNS}
    unknown = set(kw) - set(COLUMNS)
    if unknown:
        raise KeyError(f"unknown report columns {sorted(unknown)}")
    row.update(kw)
    return row


@dataclass
class EvalReport:
    rows: List[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    matrices: Dict[str, dict] = field(default_factory=dict)
    spectra: Dict[str, dict] = field(default_factory=dict)

    def validate(self) -> None:
        for i, r in enumerate(self.rows):
            for k in UNIT_RANGE:
                v = r.get(k)
                if v is not None and not (0.0 <= v <= 1.0):
                    raise ValueError(f"row {i}: {k}={v} outside [0,1]")
            if r.get("psnr") is not None and not 0.0 <= r["psnr"] <= 80.0:
                raise ValueError(f"row {i}: psnr={r['psnr']} outside [0,80]")
            if r.get("feature_distance") is not None and r["feature_distance"] < 0:
                raise ValueError(f"row {i}: negative feature distance")

    def select(self, **match) -> List[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def one(self, **match) -> dict:
        found = self.select(**match)
        if len(found) != 1:
            raise LookupError(f"{len(found)} rows match {match}")
        return found[0]

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "provenance": self.provenance, "matrices": self.matrices,
                           "spectra": self.spectra}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["rows"], d["provenance"], d["matrices"], d["spectra"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(COLUMNS)
        for r in self.rows:
            wr.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                         for c in COLUMNS])
        return buf.getvalue()

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.matrices.update(other.matrices)
        self.spectra.update(other.spectra)


def _provenance(cfg: ExperimentConfig, pipeline: str) -> dict:
    return {
        "pipeline": pipeline,
        "config_hash": cfg.content_hash(),
        "config": cfg.to_dict(),
        "seeds": cfg.resolved_seeds(),
        "toolkit_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "aggregation": AGGREGATION_NOTE,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }


def _matrix_csv(m: dict) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    labels = m["labels"]
    wr.writerow(["source\\target"] + labels)
    for lab, vals in zip(labels, m["values"]):
        wr.writerow([lab] + ["" if v is None else repr(float(v)) for v in vals])
    return buf.getvalue()


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def check_output_dir(path) -> Path:
    """Create ``path`` if needed and prove it writable, before any computation."""
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write_probe"
        atomic_write_text(probe, "ok")
        probe.unlink()
    except OSError as exc:
        raise PipelineError(f"output directory {str(p)!r} is not writable: {exc}") from exc
    return p


def emit_report(report: EvalReport, output_dir, formats: Sequence[str] = ("csv", "json", "matrix", "pgm"),
                stem: str = "report") -> List[Path]:
    """Write the report; every file is written atomically. Returns the paths written."""
    report.validate()
    out = check_output_dir(output_dir)
    written = []
    if "csv" in formats:
        atomic_write_text(out / f"{stem}.csv", report.to_csv())
        written.append(out / f"{stem}.csv")
    if "json" in formats:
        atomic_write_text(out / f"{stem}.json", report.to_json())
        written.append(out / f"{stem}.json")
    if "matrix" in formats:
        for name, m in sorted(report.matrices.items()):
            p = out / f"matrix_{_safe(name)}.csv"
            atomic_write_text(p, _matrix_csv(m))
            written.append(p)
    if "pgm" in formats:
        for name, s in sorted(report.spectra.items()):
            for key in ("spectrum", "mean_perturbation"):
                p = out / f"{key}_{_safe(name)}.pgm"
                scale = save_pgm16(p, np.asarray(s[key]))
                atomic_write_text(p.with_suffix(".scale.json"), json.dumps(scale, sort_keys=True))
                written += [p, p.with_suffix(".scale.json")]
    return written


# ---------------------------------------------------------------------------
# context: data, detectors and cached adversarials
# ---------------------------------------------------------------------------


class Context:
    """Everything a run derives from its config, computed lazily and memoised."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self._detectors: Dict[str, Detector] = {}
        self._adv: Dict[Tuple[str, str], Tuple[np.ndarray, np.ndarray]] = {}
        self._robust: Dict[Tuple[str, str], Detector] = {}
        if cfg.dataset_path:
            images = load_dataset(cfg.dataset_path, cfg.dataset_labeling,
                                  tuple(cfg.corpus.get("resolution", (32, 32))))
        else:
            images = generate_corpus(cfg.corpus_spec())
        self.train, held = split_corpus(images, cfg.holdout, cfg.seed("split"))
        if cfg.eval_limit is not None:
            reals = [im for im in held if im.label == REAL][: cfg.eval_limit]
            fakes = [im for im in held if im.label == FAKE][: cfg.eval_limit]
            held = reals + fakes
        self.heldout = held
        self.x, self.y = stack(held)
        self.ids = [im.id for im in held]

    # -- detectors ---------------------------------------------------------

    @property
    def labels(self) -> List[str]:
        return [s.label() for s in self.cfg.detectors]

    def detector(self, label: str) -> Detector:
        if label not in self._detectors:
            spec = next(s for s in self.cfg.detectors if s.label() == label)
            if not spec.train_fresh:
                det = load_detector(spec.checkpoint)
            else:
                det = build_detector(spec.family, spec.seed)
                det = train_detector(det, self.train, epochs=spec.epochs, lr=spec.learning_rate(),
                                     augment=Augment.from_flags(spec.augment),
                                     seed=self.cfg.seed("train") * 1000 + spec.seed, batch_size=spec.batch_size)
            self._detectors[label] = det
        return self._detectors[label]

    def detectors(self) -> List[Detector]:
        return [self.detector(lab) for lab in self.labels]

    def reference_probe(self) -> Optional[Detector]:
        for s in self.cfg.detectors:
            if s.family == FEATURE_PROBE:
                return self.detector(s.label())
        return None

    # -- adversarials ------------------------------------------------------

    def attack_input(self) -> np.ndarray:
        pre = self.cfg.attacker_pre_degradation
        if not pre:
            return self.x
        d = dict(pre)
        d.setdefault("seed", self.cfg.seed("noise"))
        return apply_degradation(self.x, DegradationConfig(**d))

    def adversarial(self, det: Detector, cfg: AttackConfig) -> Tuple[np.ndarray, np.ndarray]:
        key = (det.label(), cfg.tag() + f"-s{cfg.seed}-k{cfg.steps}-r{cfg.relative_step!r}")
        if key not in self._adv:
            base = self.attack_input()
            if cfg.epsilon == 0:
                self._adv[key] = (base.copy(), np.zeros(len(base), dtype=bool))
            else:
                self._adv[key] = craft(det, base, self.y, cfg)
        return self._adv[key]

    def robust_variant(self, det: Detector, rcfg: RobustFinetuneConfig) -> Detector:
        key = (det.label(), json.dumps(rcfg.to_dict(), sort_keys=True))
        if key not in self._robust:
            self._robust[key] = robust_finetune(det, self.train, rcfg)
        return self._robust[key]


_CONTEXTS: Dict[str, Context] = {}


def get_context(cfg: ExperimentConfig) -> Context:
    """Process-wide memo keyed by the config hash."""
    h = cfg.content_hash()
    if h not in _CONTEXTS:
        _CONTEXTS[h] = Context(cfg)
    return _CONTEXTS[h]


def clear_contexts() -> None:
    _CONTEXTS.clear()


# ---------------------------------------------------------------------------
# metric helpers
# ---------------------------------------------------------------------------


def _auc(scores, y) -> Optional[float]:
    try:
        return auc_roc(scores, y)
    except ValueError:
        return None


def _tpr(scores, y) -> Optional[float]:
    try:
        return tpr_at_fpr(scores, y, 0.05)
    except ValueError:
        return None


def _asr(pb, pa, y, mask=None) -> Optional[float]:
    ok = pb == y
    if mask is not None:
        ok = ok & mask
    return float(np.mean(pa[ok] != pb[ok])) if ok.any() else None


def _classification(scores, y, threshold) -> dict:
    return {"accuracy": float(np.mean(predict_labels(scores, threshold) == y)), "auc": _auc(scores, y),
            "tpr_at_5fpr": _tpr(scores, y), "n": int(len(y))}


def _quality(ctx: Context, adv: np.ndarray) -> dict:
    x = ctx.x
    q = {"psnr": float(np.mean([psnr(a, b) for a, b in zip(x, adv)])),
         "ssim": float(np.mean([ssim(a, b) for a, b in zip(x, adv)]))}
    ref = ctx.reference_probe()
    q["feature_distance"] = None if ref is None else float(np.mean(feature_distance_batch(ref, x, adv)))
    return q


def _attack_fields(cfg: AttackConfig) -> dict:
    return {"attack": cfg.method, "norm": cfg.norm, "epsilon": cfg.epsilon}


def _attacked_row(ctx: Context, source: Detector, target: Detector, acfg: AttackConfig, adv, stuck,
                  pipeline: str, regime: str, with_quality: bool, variant: Optional[str] = None) -> dict:
    y = ctx.y
    before = score_batch(target, ctx.x)
    after = score_batch(target, adv)
    pb = predict_labels(before, target.threshold)
    pa = predict_labels(after, target.threshold)
    row = _row(pipeline=pipeline, regime=regime, detector=target.label(), role="target", source=source.label(),
               target=target.label(), variant=variant, degradation=IDENTITY, split="heldout",
               asr=_asr(pb, pa, y), asr_fake_to_real=_asr(pb, pa, y, y == FAKE),
               zero_gradient=int(np.sum(stuck)) if source is target else None,
               **_attack_fields(acfg), **_classification(after, y, target.threshold))
    if with_quality:
        row.update(_quality(ctx, adv))
    return row


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------


def _start(cfg: ExperimentConfig, pipeline: str, ctx: Optional[Context]) -> Tuple[Context, EvalReport]:
    ctx = ctx or get_context(cfg)
    return ctx, EvalReport(provenance=_provenance(cfg, pipeline))


def run_benign(cfg: ExperimentConfig, ctx: Optional[Context] = None, include_train: bool = False) -> EvalReport:
    """Clean accuracy@threshold, AUC and TPR@5%FPR per detector on held-out data.

    ``include_train`` adds one row per detector scored on its training split.
    """
    ctx, rep = _start(cfg, "benign", ctx)
    splits = [("heldout", ctx.x, ctx.y)]
    if include_train:
        splits.append(("train",) + stack(ctx.train))
    for det in ctx.detectors():
        for split, x, y in splits:
            rep.rows.append(_row(pipeline="benign", regime="benign", detector=det.label(), role="target",
                                 target=det.label(), attack="none", degradation=IDENTITY, split=split,
                                 **_classification(score_batch(det, x), y, det.threshold)))
    rep.validate()
    return rep


def run_whitebox(cfg: ExperimentConfig, ctx: Optional[Context] = None, with_spectra: bool = True) -> EvalReport:
    """Attack each detector with every config of the attack grid and re-score it."""
    ctx, rep = _start(cfg, "whitebox", ctx)
    spec_cfg = ctx.cfg._attack(cfg.spectrum_attack)
    for det in ctx.detectors():
        for acfg in cfg.attack_grid():
            adv, stuck = ctx.adversarial(det, acfg)
            rep.rows.append(_attacked_row(ctx, det, det, acfg, adv, stuck, "whitebox", "whitebox", True))
        if with_spectra:
            adv, _ = ctx.adversarial(det, spec_cfg)
            for name, mask in (("all", slice(None)), ("real", ctx.y == REAL), ("fake", ctx.y == FAKE)):
                s = mean_perturbation_spectrum(ctx.x[mask], adv[mask])
                rep.spectra[f"{det.label()}_{spec_cfg.tag()}_{name}"] = {
                    "spectrum": s.magnitudes.tolist(), "mean_perturbation": s.mean_perturbation.tolist()}
    rep.validate()
    return rep


def _matrix(labels: List[str], values: np.ndarray) -> dict:
    """Append the average column (per source), average row (per target) and overall cell.

    Averages cover off-diagonal (black-box) entries only.
    """
    n = len(labels)
    off = ~np.eye(n, dtype=bool)
    full = np.full((n + 1, n + 1), np.nan)
    full[:n, :n] = values
    with np.errstate(invalid="ignore"):
        for i in range(n):
            full[i, n] = np.nanmean(np.where(off[i], values[i], np.nan))
            full[n, i] = np.nanmean(np.where(off[:, i], values[:, i], np.nan))
        full[n, n] = np.nanmean(np.where(off, values, np.nan))
    return {"labels": labels + ["average"],
            "values": [[None if np.isnan(v) else float(v) for v in row] for row in full]}


def run_transfer_matrix(cfg: ExperimentConfig, ctx: Optional[Context] = None) -> EvalReport:
    """Adversarials crafted on each source, scored on every target; one ASR matrix per attack."""
    ctx, rep = _start(cfg, "transfer", ctx)
    dets = ctx.detectors()
    if len(dets) < 2:
        raise PipelineError("transfer matrix needs at least two detectors")
    labels = [d.label() for d in dets]
    for acfg in cfg.transfer_grid():
        m = np.full((len(dets), len(dets)), np.nan)
        for i, src in enumerate(dets):
            adv, stuck = ctx.adversarial(src, acfg)
            for j, tgt in enumerate(dets):
                row = _attacked_row(ctx, src, tgt, acfg, adv, stuck, "transfer",
                                    "whitebox" if i == j else "blackbox", False)
                row["role"] = "target"
                rep.rows.append(row)
                m[i, j] = np.nan if row["asr"] is None else row["asr"]
        rep.matrices[f"asr_{acfg.tag()}"] = _matrix(labels, m)
    rep.validate()
    return rep


def run_degradation_sweep(cfg: ExperimentConfig, ctx: Optional[Context] = None) -> EvalReport:
    """Accuracy per degradation in the benign, white-box and black-box regimes.

    Degradation is applied after the attack. Black-box rows give, per
    source, the mean target accuracy over all targets except the source.
    """
    ctx, rep = _start(cfg, "degrade-sweep", ctx)
    dets = ctx.detectors()
    acfg = ctx.cfg._attack(cfg.degradation_attack)
    advs = {d.label(): ctx.adversarial(d, acfg)[0] for d in dets}
    for dcfg in cfg.degradation_grid():
        idx = np.arange(len(ctx.x))
        clean = apply_degradation(ctx.x, dcfg, idx)
        degraded = {lab: apply_degradation(a, dcfg, idx) for lab, a in advs.items()}
        preds = {}
        for tgt in dets:
            s = score_batch(tgt, clean)
            rep.rows.append(_row(pipeline="degrade-sweep", regime="benign", detector=tgt.label(), role="target",
                                 target=tgt.label(), attack="none", degradation=dcfg.tag(), split="heldout",
                                 **_classification(s, ctx.y, tgt.threshold)))
            for src in dets:
                preds[(src.label(), tgt.label())] = predict_labels(score_batch(tgt, degraded[src.label()]),
                                                                   tgt.threshold)
        for src in dets:
            acc_wb = float(np.mean(preds[(src.label(), src.label())] == ctx.y))
            rep.rows.append(_row(pipeline="degrade-sweep", regime="whitebox", detector=src.label(), role="source",
                                 source=src.label(), target=src.label(), degradation=dcfg.tag(), split="heldout",
                                 accuracy=acc_wb, n=len(ctx.y), **_attack_fields(acfg)))
            others = [t.label() for t in dets if t.label() != src.label()]
            if others:
                acc_bb = float(np.mean([np.mean(preds[(src.label(), t)] == ctx.y) for t in others]))
                rep.rows.append(_row(pipeline="degrade-sweep", regime="blackbox", detector=src.label(),
                                     role="source", source=src.label(), target="mean-excluding-source",
                                     degradation=dcfg.tag(), split="heldout", accuracy=acc_bb, n=len(ctx.y),
                                     **_attack_fields(acfg)))
    rep.validate()
    return rep


def run_defense_eval(cfg: ExperimentConfig, ctx: Optional[Context] = None) -> EvalReport:
    """Compare the undefended FeatureProbe with its robust variants (R2, R4, ...)."""
    ctx, rep = _start(cfg, "defense", ctx)
    if cfg.defense is not None and not cfg.defense:
        raise PipelineError("defense config is empty")
    label = cfg.defense_detector or next((s.label() for s in cfg.detectors if s.family == FEATURE_PROBE), None)
    if label is None:
        raise PipelineError("defense evaluation needs a FeatureProbe detector")
    base = ctx.detector(label)
    if base.family != FEATURE_PROBE:
        raise PipelineError(f"{label} is not a FeatureProbe")
    variants = [("undefended", base)]
    for rcfg in cfg.defense_configs():
        rob = ctx.robust_variant(base, rcfg)
        variants.append((rob.metadata["defense"]["variant"], rob))
    sources = [d for d in ctx.detectors() if d.label() != label]
    for name, det in variants:
        rep.rows.append(_row(pipeline="defense", regime="benign", detector=label, role="target", target=label,
                             variant=name, attack="none", degradation=IDENTITY, split="heldout",
                             **_classification(score_batch(det, ctx.x), ctx.y, det.threshold)))
        for acfg in cfg.defense_attack_grid():
            adv, stuck = ctx.adversarial(det, acfg)
            row = _attacked_row(ctx, det, det, acfg, adv, stuck, "defense", "whitebox", False, variant=name)
            row.update(detector=label, source=label, target=label)
            rep.rows.append(row)
        for acfg in cfg.transfer_grid():
            for src in sources:
                adv, stuck = ctx.adversarial(src, acfg)
                row = _attacked_row(ctx, src, det, acfg, adv, stuck, "defense", "blackbox", False, variant=name)
                row.update(detector=label, target=label)
                rep.rows.append(row)
    rep.validate()
    return rep


PIPELINES = {
    "benign": run_benign,
    "whitebox": run_whitebox,
    "transfer": run_transfer_matrix,
    "degrade-sweep": run_degradation_sweep,
    "defense": run_defense_eval,
}


def run_pipeline(name: str, cfg: ExperimentConfig, output_dir=None) -> EvalReport:
    """Run one pipeline and emit its report into ``output_dir`` (default ``cfg.output_dir``)."""
    out = check_output_dir(output_dir or cfg.output_dir)
    rep = PIPELINES[name](cfg)
    emit_report(rep, out, stem=name)
    return rep


def train_all(cfg: ExperimentConfig, output_dir=None) -> List[Path]:
    """Train (or load) every detector and save checkpoints under ``output_dir/checkpoints``."""
    out = check_output_dir(output_dir or cfg.output_dir) / "checkpoints"
    ctx = get_context(cfg)
    paths = []
    for det in ctx.detectors():
        p = out / f"{_safe(det.label())}.json"
        out.mkdir(parents=True, exist_ok=True)
        save_detector(det, p, {"config_hash": cfg.content_hash()})
        paths.append(p)
    return paths
