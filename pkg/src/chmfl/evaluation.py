"""Metrics, ROC/AUC, k-fold cross-validation, CFL weight sweep and the t-test."""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import betainc

from .imaging import PatientRecord
from .network import ModelParams, NetworkConfig, dm_probability, forward, segmentation_decision
from .tensor import Tensor, no_grad
from .training import TrainingConfig, train

logger = logging.getLogger(__name__)

DM_THRESHOLD = 0.5
DEFAULT_WEIGHTS = (0.0, 0.25, 0.5, 0.75, 1.0)
CLASSIFICATION_KEYS = ("acc", "sen", "spe", "pre", "f1")
SEGMENTATION_KEYS = ("dsc", "jaccard", "voxel_acc", "voxel_sen", "voxel_spe")


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den else None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"confusion count {name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @classmethod
    def from_decisions(cls, decisions, labels) -> "ConfusionCounts":
        d = np.asarray(decisions).astype(bool).ravel()
        t = np.asarray(labels).astype(bool).ravel()
        if d.shape != t.shape:
            raise ValueError(f"{d.size} decisions for {t.size} labels")
        return cls(int(np.sum(d & t)), int(np.sum(d & ~t)), int(np.sum(~d & ~t)), int(np.sum(~d & t)))


@dataclass(frozen=True)
class ClassificationMetrics:
    """Each field is ``None`` when its denominator is zero."""

    acc: Optional[float]
    sen: Optional[float]
    spe: Optional[float]
    pre: Optional[float]
    f1: Optional[float]


def classification_metrics(c: ConfusionCounts) -> ClassificationMetrics:
    sen = _ratio(c.tp, c.tp + c.fn)
    pre = _ratio(c.tp, c.tp + c.fp)
    f1 = None
    if sen is not None and pre is not None:
        f1 = _ratio(2 * pre * sen, pre + sen)
    return ClassificationMetrics(
        acc=_ratio(c.tp + c.tn, c.total),
        sen=sen,
        spe=_ratio(c.tn, c.tn + c.fp),
        pre=pre,
        f1=f1,
    )


def roc_auc(scores, labels) -> Tuple[float, List[Tuple[float, float]]]:
    """Mann-Whitney AUC (ties count one half) and the threshold-swept ROC polyline."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs both classes present")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    auc = float((greater + 0.5 * ties) / (pos.size * neg.size))

    points = [(0.0, 0.0)]
    for thr in np.unique(s)[::-1]:
        points.append((float(np.mean(neg >= thr)), float(np.mean(pos >= thr))))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return auc, points


@dataclass(frozen=True)
class SegmentationMetrics:
    dsc: float
    jaccard: float
    voxel_acc: float
    voxel_sen: Optional[float]
    voxel_spe: Optional[float]


def segmentation_metrics(pred, truth) -> SegmentationMetrics:
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction extents {p.shape} differ from truth {t.shape}")
    p, t = p.astype(bool), t.astype(bool)
    inter = int(np.sum(p & t))
    size = int(p.sum() + t.sum())
    union = int(np.sum(p | t))
    vc = ConfusionCounts.from_decisions(p, t)
    return SegmentationMetrics(
        dsc=2 * inter / size if size else 1.0,
        jaccard=inter / union if union else 1.0,
        voxel_acc=(vc.tp + vc.tn) / vc.total,
        voxel_sen=_ratio(vc.tp, vc.tp + vc.fn),
        voxel_spe=_ratio(vc.tn, vc.tn + vc.fp),
    )


def _mean_defined(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def mean_segmentation(items: Sequence[SegmentationMetrics]) -> Optional[Dict[str, Optional[float]]]:
    if not items:
        return None
    return {k: _mean_defined(getattr(m, k) for m in items) for k in SEGMENTATION_KEYS}


@dataclass
class MetricsReport:
    confusion: ConfusionCounts
    metrics: ClassificationMetrics
    auc: Optional[float]
    roc_points: List[Tuple[float, float]] = field(default_factory=list)
    seg: Optional[Dict[str, Optional[float]]] = None

    @classmethod
    def from_scores(cls, scores, labels, seg: Sequence[SegmentationMetrics] = ()) -> "MetricsReport":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
        conf = ConfusionCounts.from_decisions(scores >= DM_THRESHOLD, labels)
        auc, points = None, []
        if len(set(labels.tolist())) == 2:
            auc, points = roc_auc(scores, labels)
        return cls(conf, classification_metrics(conf), auc, points, mean_segmentation(seg))

    def flat(self) -> Dict[str, Optional[float]]:
        out: Dict[str, Optional[float]] = dict(asdict(self.metrics))
        out["auc"] = self.auc
        if self.seg:
            out.update(self.seg)
        out.update({k: v for k, v in asdict(self.confusion).items()})
        return out


# ---------------------------------------------------------------------------
# folds

@dataclass(frozen=True)
class FoldSplit:
    assignment: Dict[str, int]
    k: int

    def test_ids(self, fold: int) -> List[str]:
        return [i for i, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> List[str]:
        return [i for i, f in self.assignment.items() if f != fold]

    def sizes(self) -> List[int]:
        return [len(self.test_ids(f)) for f in range(self.k)]


def make_folds(ids: Sequence[str], k: int = 6, seed: int = 0) -> FoldSplit:
    ids = list(ids)
    if k < 2:
        raise ValueError("need at least 2 folds")
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} patients cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit({ids[j]: pos % k for pos, j in enumerate(order)}, k)


# ---------------------------------------------------------------------------
# prediction and cross-validation

def predict(params: ModelParams, record: PatientRecord, cfg: NetworkConfig, dtype=np.float32):
    """Inference-mode DM probability and binary segmentation for one preprocessed record."""
    with no_grad():
        out = forward(params, Tensor(record.pet.voxels[None, None], dtype=dtype),
                      Tensor(record.ct.voxels[None, None], dtype=dtype), cfg, training=False)
    return dm_probability(out.dm_logits), segmentation_decision(out.seg_logits)


@dataclass
class FoldResult:
    fold: int
    test_ids: List[str]
    scores: List[float]
    labels: List[int]
    report: MetricsReport
    epochs: int


@dataclass
class CrossValidationResult:
    folds: List[FoldResult]
    mean: Dict[str, Optional[float]]
    pooled: MetricsReport
    undefined_auc_folds: List[int]


def _fold_mean(folds: Sequence[FoldResult]) -> Dict[str, Optional[float]]:
    keys = list(CLASSIFICATION_KEYS) + ["auc"] + list(SEGMENTATION_KEYS)
    rows = [f.report.flat() for f in folds]
    return {k: _mean_defined(r.get(k) for r in rows) for k in keys}


def cross_validate(dataset: Sequence[PatientRecord], net_cfg: NetworkConfig, train_cfg: TrainingConfig,
                   k: int = 6, seed: int = 0, dtype=np.float32,
                   on_fold: Optional[Callable[[FoldResult], None]] = None) -> CrossValidationResult:
    """Train on k-1 folds, test on the held-out fold, for every fold.

    ``dataset`` holds preprocessed records. Each fold's training seed is
    derived from ``train_cfg.seed`` and the fold index.
    """
    by_id = {r.id: r for r in dataset}
    split = make_folds([r.id for r in dataset], k, seed)
    for f in range(k):
        if len({by_id[i].dm_label for i in split.train_ids(f)}) < 2:
            raise ValueError(f"training portion of fold {f} contains a single class")

    folds: List[FoldResult] = []
    undefined: List[int] = []
    for f in range(k):
        train_set = [by_id[i] for i in split.train_ids(f)]
        rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, f]))
        params, history = train(train_set, net_cfg, train_cfg, rng=rng, dtype=dtype)
        test_ids = split.test_ids(f)
        scores, labels, seg = [], [], []
        for i in test_ids:
            rec = by_id[i]
            prob, mask = predict(params, rec, net_cfg, dtype)
            scores.append(prob)
            labels.append(rec.dm_label)
            seg.append(segmentation_metrics(mask, rec.mask.voxels))
        report = MetricsReport.from_scores(scores, labels, seg)
        if report.auc is None:
            undefined.append(f)
            warnings.warn(f"fold {f} test set holds a single class; its AUC is undefined and excluded")
        result = FoldResult(f, test_ids, scores, labels, report, len(history))
        logger.info("fold %d: acc %s auc %s dsc %s", f, report.metrics.acc, report.auc,
                    report.seg["dsc"] if report.seg else None)
        if on_fold is not None:
            on_fold(result)
        folds.append(result)

    all_scores = [s for fr in folds for s in fr.scores]
    all_labels = [y for fr in folds for y in fr.labels]
    pooled = MetricsReport.from_scores(all_scores, all_labels)
    seg_means = [fr.report.seg for fr in folds if fr.report.seg]
    sizes = [len(fr.test_ids) for fr in folds if fr.report.seg]
    if seg_means:
        # weight fold means by fold size so the pooled value is the per-patient mean
        pooled.seg = {key: _weighted(seg_means, sizes, key) for key in SEGMENTATION_KEYS}
    return CrossValidationResult(folds, _fold_mean(folds), pooled, undefined)


def _weighted(rows, sizes, key) -> Optional[float]:
    pairs = [(r[key], n) for r, n in zip(rows, sizes) if r[key] is not None]
    if not pairs:
        return None
    return float(sum(v * n for v, n in pairs) / sum(n for _, n in pairs))


@dataclass
class SweepRow:
    w: float
    acc: Optional[float]
    sen: Optional[float]
    spe: Optional[float]
    auc: Optional[float]
    dsc: Optional[float]


def weight_sweep(dataset, net_cfg: NetworkConfig, train_cfg: TrainingConfig,
                 w_values: Sequence[float] = DEFAULT_WEIGHTS, k: int = 6, seed: int = 0,
                 dtype=np.float32) -> List[SweepRow]:
    for w in w_values:
        if not 0 <= w <= 1:
            raise ValueError(f"CFL weight {w} outside [0, 1]")
    rows = []
    for w in w_values:
        res = cross_validate(dataset, net_cfg, replace(train_cfg, w=float(w)), k, seed, dtype)
        m = res.mean
        rows.append(SweepRow(float(w), m["acc"], m["sen"], m["spe"], m["auc"], m["dsc"]))
    return rows


# ---------------------------------------------------------------------------
# statistics

def unpaired_t_test(a, b) -> Tuple[float, float]:
    """Equal-variance two-sample t statistic and two-sided p value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    df = a.size + b.size - 2
    pooled = ((a.size - 1) * a.var(ddof=1) + (b.size - 1) * b.var(ddof=1)) / df
    if pooled <= 0:
        raise ValueError("pooled variance is zero")
    t = (a.mean() - b.mean()) / math.sqrt(pooled * (1 / a.size + 1 / b.size))
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2)
    p = float(betainc(df / 2, 0.5, df / (df + t * t)))
    return float(t), p


# ---------------------------------------------------------------------------
# report writers

def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def format_cv_table(result: CrossValidationResult) -> str:
    keys = list(CLASSIFICATION_KEYS) + ["auc", "dsc", "jaccard"]
    lines = ["fold  " + "  ".join(f"{k:>8}" for k in keys)]
    for fr in result.folds:
        row = fr.report.flat()
        lines.append(f"{fr.fold:<4}  " + "  ".join(f"{_fmt(row.get(k)):>8}" for k in keys))
    lines.append("mean  " + "  ".join(f"{_fmt(result.mean.get(k)):>8}" for k in keys))
    pooled = result.pooled.flat()
    lines.append("pool  " + "  ".join(f"{_fmt(pooled.get(k)):>8}" for k in keys))
    c = result.pooled.confusion
    lines.append(f"pooled confusion: tp={c.tp} fp={c.fp} tn={c.tn} fn={c.fn}")
    if result.undefined_auc_folds:
        lines.append(f"AUC undefined for folds {result.undefined_auc_folds} (excluded from mean)")
    return "\n".join(lines) + "\n"


def format_sweep_table(rows: Sequence[SweepRow]) -> str:
    keys = ("acc", "sen", "spe", "auc", "dsc")
    lines = ["w     " + "  ".join(f"{k:>8}" for k in keys)]
    for r in rows:
        lines.append(f"{r.w:<4.2f}  " + "  ".join(f"{_fmt(getattr(r, k)):>8}" for k in keys))
    return "\n".join(lines) + "\n"


def cv_summary(result: CrossValidationResult) -> Dict[str, object]:
    return {
        "mean": result.mean,
        "pooled": result.pooled.flat(),
        "folds": [{"fold": fr.fold, "epochs": fr.epochs, **fr.report.flat()} for fr in result.folds],
        "undefined_auc_folds": result.undefined_auc_folds,
    }


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def write_json(mapping, path) -> None:
    _atomic_write_text(path, json.dumps(mapping, indent=2, sort_keys=True) + "\n")


def write_roc(points: Sequence[Tuple[float, float]], path) -> None:
    _atomic_write_text(path, "".join(f"{fpr!r} {tpr!r}\n" for fpr, tpr in points))
