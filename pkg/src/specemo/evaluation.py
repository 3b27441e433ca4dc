"""Experiment protocols: fold plans, neutral-label handling, CV and cross-corpus runs, metrics."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .audio_io import DatasetManifest, LABELS
from .backbone import BackboneConfig
from .heads import TrainConfig, fit

log = logging.getLogger(__name__)


class TooFewSpeakers(ValueError):
    pass


class TooFewSamplesPerClass(ValueError):
    pass


class LabelSpaceMismatch(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


# -- metrics -------------------------------------------------------------------

@dataclass
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False


@dataclass
class EvalReport:
    labels: List[str]
    accuracy: float
    per_class: List[ClassMetrics]
    confusion: np.ndarray
    macro_f1: float
    fold_stats: Optional[dict] = None
    experiment: str = ""
    config_digest: str = ""

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config_digest": self.config_digest,
            "labels": list(self.labels),
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "fold_stats": self.fold_stats,
            "per_class": [vars(c).copy() for c in self.per_class],
            "confusion": self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(list(d["labels"]), d["accuracy"], [ClassMetrics(**c) for c in d["per_class"]],
                   np.asarray(d["confusion"], dtype=np.int64), d["macro_f1"], d.get("fold_stats"),
                   d.get("experiment", ""), d.get("config_digest", ""))

    def format_table(self) -> str:
        """Per-class precision / recall / F1 table in the usual report layout."""
        width = max(8, max(len(l) for l in self.labels))
        lines = [f"{'Label':<{width}}  Precision  Recall  F1-score  Support"]
        for c in self.per_class:
            flag = " *" if c.degenerate else ""
            lines.append(f"{c.label:<{width}}  {c.precision:9.3f}  {c.recall:6.3f}  {c.f1:8.3f}  {c.support:7d}{flag}")
        lines.append("")
        lines.append(f"accuracy {self.accuracy:.3f}   macro F1 {self.macro_f1:.3f}   n = {self.total}")
        if self.fold_stats:
            fs = self.fold_stats
            lines.append(f"folds: mean {fs['mean']:.3f} +/- {fs['std']:.3f}, max {fs['max']:.3f} (k = {fs['k']})")
        if any(c.degenerate for c in self.per_class):
            lines.append("* zero denominator in precision or recall; reported as 0")
        return "\n".join(lines)


def report_from_confusion(confusion: np.ndarray, labels: Sequence[str]) -> EvalReport:
    cm = np.asarray(confusion, dtype=np.int64)
    per_class = []
    for k, label in enumerate(labels):
        tp = int(cm[k, k])
        pred = int(cm[:, k].sum())
        true = int(cm[k, :].sum())
        degenerate = pred == 0 or true == 0
        p = tp / pred if pred else 0.0
        r = tp / true if true else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        per_class.append(ClassMetrics(label, p, r, f1, true, degenerate))
    total = int(cm.sum())
    acc = float(np.trace(cm)) / total if total else 0.0
    macro = float(np.mean([c.f1 for c in per_class])) if per_class else 0.0
    return EvalReport(list(labels), acc, per_class, cm, macro)


def compute_metrics(y_true, y_pred, label_set: Sequence[str] = LABELS) -> EvalReport:
    """Confusion matrix (rows true, columns predicted) and per-class metrics.

    Labels may be given as indices into ``label_set`` or as label strings.
    """
    if len(y_true) != len(y_pred):
        raise LengthMismatch(f"{len(y_true)} true vs {len(y_pred)} predicted labels")
    lookup = {lab: i for i, lab in enumerate(label_set)}

    def as_index(seq):
        return np.array([lookup[v] if isinstance(v, str) else int(v) for v in seq], dtype=np.int64)

    t, p = as_index(y_true), as_index(y_pred)
    k = len(label_set)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return report_from_confusion(cm, label_set)


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def aggregate(reports: Sequence[EvalReport]) -> EvalReport:
    """Summed confusion over folds plus mean / std / max fold accuracy."""
    cm = sum(r.confusion for r in reports)
    out = report_from_confusion(cm, reports[0].labels)
    accs = np.array([r.accuracy for r in reports])
    out.fold_stats = {"k": len(reports), "mean": float(accs.mean()), "std": float(accs.std()),
                      "max": float(accs.max()), "accuracies": [float(a) for a in accs]}
    return out


# -- manifests ------------------------------------------------------------------

def collapse_neutral(manifest: DatasetManifest) -> DatasetManifest:
    """Merge every neutral style into the single NEUTRAL class.

    Rows keep their style tag (used later for test filtering); only the class
    space changes, to the canonical seven labels.
    """
    return replace(manifest, samples=tuple(manifest.samples), label_set=LABELS)


def neutral_style_classes(manifest: DatasetManifest) -> List[str]:
    """Per-row class keys before collapsing, e.g. ``NEUTRAL/fast``."""
    return [f"{s.label}/{s.style}" if s.style else s.label for s in manifest.samples]


def normal_neutral_only(manifest: DatasetManifest) -> DatasetManifest:
    """Drop neutral rows whose style is anything other than ``normal``."""
    keep = [i for i, s in enumerate(manifest.samples)
            if s.label != "NEUTRAL" or s.style in (None, "normal")]
    return manifest.subset(keep)


def has_neutral_styles(manifest: DatasetManifest) -> bool:
    return any(s.style is not None for s in manifest.samples)


# -- folds ------------------------------------------------------------------------

@dataclass
class FoldPlan:
    kind: str
    k: int
    assignments: np.ndarray
    seed: int
    train_val: List[tuple] = field(default_factory=list)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def complement(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def _split_train_val(indices: np.ndarray, labels: np.ndarray, val_fraction: float, rng) -> tuple:
    val = []
    for c in np.unique(labels[indices]):
        members = indices[labels[indices] == c]
        members = members[rng.permutation(len(members))]
        n_val = int(round(val_fraction * len(members)))
        if len(members) > 1:
            n_val = min(max(n_val, 1), len(members) - 1)
        else:
            n_val = 0
        val.extend(members[:n_val].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    train = np.setdiff1d(indices, val)
    return train, val


def make_folds(manifest: DatasetManifest, kind: str = "stratified", k: int = 10, seed: int = 0,
               val_fraction: float = 0.3) -> FoldPlan:
    """Stratified or speaker-grouped k-fold plan with a train/validation sub-split.

    Stratified folds deal each class's shuffled samples round-robin, continuing
    the fold pointer across classes so fold sizes stay within one of each
    other. Speaker folds deal shuffled speakers round-robin. Inside every fold's
    complement, ``val_fraction`` of each class is set aside for early stopping.
    """
    labels = manifest.label_indices()
    n = len(labels)
    rng = np.random.default_rng([seed, 0])
    assign = np.full(n, -1, dtype=np.int64)
    if kind == "stratified":
        counts = np.bincount(labels)
        if np.any((counts > 0) & (counts < k)):
            raise TooFewSamplesPerClass(f"every class needs >= {k} samples, got {counts[counts > 0].min()}")
        pointer = 0
        for c in np.unique(labels):
            members = np.flatnonzero(labels == c)
            members = members[rng.permutation(len(members))]
            for j, idx in enumerate(members):
                assign[idx] = (pointer + j) % k
            pointer = (pointer + len(members)) % k
    elif kind == "by_speaker":
        speakers = sorted({s.speaker_id for s in manifest.samples})
        if len(speakers) < k:
            raise TooFewSpeakers(f"{len(speakers)} speakers for {k} folds")
        order = [speakers[i] for i in rng.permutation(len(speakers))]
        fold_of = {spk: j % k for j, spk in enumerate(order)}
        assign = np.array([fold_of[s.speaker_id] for s in manifest.samples], dtype=np.int64)
    else:
        raise ValueError(f"unknown fold kind {kind!r}")
    plan = FoldPlan(kind, k, assign, seed)
    for f in range(k):
        sub_rng = np.random.default_rng([seed, 1, f])
        plan.train_val.append(_split_train_val(plan.complement(f), labels, val_fraction, sub_rng))
    return plan


# -- running experiments ------------------------------------------------------------

@dataclass
class ModelSpec:
    """Everything needed to train one classifier."""

    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    weights: Optional[str] = None   # pretrained trunk container

    def build_fit(self) -> Callable:
        return _DefaultFit(self)


class _DefaultFit:
    def __init__(self, spec: ModelSpec):
        self.spec = spec

    def __call__(self, train_x, train_y, val_x, val_y, n_classes):
        trunk = None
        if self.spec.weights:
            from .backbone import Backbone
            trunk = Backbone.build(self.spec.backbone, self.spec.train.seed)
            trunk.load_weights(self.spec.weights)
        return fit(train_x, train_y, val_x, val_y, n_classes, self.spec.train, self.spec.backbone, trunk)


@dataclass
class FoldResult:
    fold: int
    report: EvalReport
    test_indices: np.ndarray
    predictions: np.ndarray
    model: object = None


def _load(manifest, indices, loader):
    if len(indices) == 0:
        return np.zeros((0,) + tuple(getattr(loader, "shape", (0,))), dtype=np.float32)
    return np.stack([loader(manifest.resolve(manifest.samples[i])) for i in indices]).astype(np.float32)


def _run_fold(args):
    manifest, plan, fold, fit_fn, loader, monitor, keep_model = args
    labels = manifest.label_indices()
    train_idx, val_idx = plan.train_val[fold]
    test_idx = plan.test_indices(fold)
    if monitor:
        monitor("train", fold)
    model = fit_fn(_load(manifest, train_idx, loader), labels[train_idx],
                   _load(manifest, val_idx, loader), labels[val_idx], len(manifest.label_set))
    if monitor:
        monitor("test", fold)
    pred, _ = model.predict(_load(manifest, test_idx, loader))
    report = compute_metrics(labels[test_idx], pred, manifest.label_set)
    return FoldResult(fold, report, test_idx, np.asarray(pred), model if keep_model else None)


def run_cv(manifest: DatasetManifest, spec: ModelSpec, plan: FoldPlan, loader: Callable,
           jobs: int = 1, fit_fn: Optional[Callable] = None, monitor: Optional[Callable] = None,
           keep_models: bool = False, experiment: str = ""):
    """k-fold evaluation. Returns ``(aggregate_report, fold_results)``.

    Each fold trains on the training part of its complement, early-stops on the
    validation part, and is scored on the held-out fold; test images are only
    loaded after training finishes. ``loader(path)`` returns an image array.
    Folds run in ``jobs`` worker processes; results are reduced in fold order.
    """
    fit_fn = fit_fn or spec.build_fit()
    tasks = [(manifest, plan, f, fit_fn, loader, monitor if jobs <= 1 else None, keep_models)
             for f in range(plan.k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    results.sort(key=lambda r: r.fold)
    for r in results:
        r.report.experiment = experiment
    agg = aggregate([r.report for r in results])
    agg.experiment = experiment
    return agg, results


def holdout(train_manifest: DatasetManifest, test_manifest: DatasetManifest, spec: ModelSpec,
            loader: Callable, seed: int = 0, val_fraction: float = 0.3, fit_fn: Optional[Callable] = None,
            monitor: Optional[Callable] = None):
    """Train on all of ``train_manifest`` (70/30 train/validation), test on ``test_manifest``.

    Returns ``(report, FoldResult)``.
    """
    if tuple(train_manifest.label_set) != tuple(test_manifest.label_set):
        raise LabelSpaceMismatch("train and test manifests use different label orders")
    fit_fn = fit_fn or spec.build_fit()
    labels = train_manifest.label_indices()
    rng = np.random.default_rng([seed, 2])
    tr, va = _split_train_val(np.arange(len(labels)), labels, val_fraction, rng)
    if monitor:
        monitor("train", 0)
    model = fit_fn(_load(train_manifest, tr, loader), labels[tr], _load(train_manifest, va, loader), labels[va],
                   len(train_manifest.label_set))
    if monitor:
        monitor("test", 0)
    test_idx = np.arange(len(test_manifest))
    pred, _ = model.predict(_load(test_manifest, test_idx, loader))
    report = compute_metrics(test_manifest.label_indices(), pred, test_manifest.label_set)
    return report, FoldResult(0, report, test_idx, np.asarray(pred), model)


def cross_corpus(train_manifest: DatasetManifest, test_manifest: DatasetManifest, spec: ModelSpec,
                 loader: Callable, seed: int = 0, **kw):
    """Train once on one corpus and test on another.

    Neutral rows of a styled test corpus are reduced to the ``normal`` style;
    the training corpus keeps all of its styles.
    """
    train_labels = {s.label for s in train_manifest.samples}
    test_labels = {s.label for s in test_manifest.samples}
    if not train_labels & test_labels or not set(test_manifest.label_set) <= set(train_manifest.label_set):
        raise LabelSpaceMismatch(f"train labels {sorted(train_labels)} vs test labels {sorted(test_labels)}")
    train_manifest = collapse_neutral(train_manifest)
    test_manifest = collapse_neutral(test_manifest)
    if has_neutral_styles(test_manifest):
        test_manifest = normal_neutral_only(test_manifest)
    return holdout(train_manifest, test_manifest, spec, loader, seed, **kw)
