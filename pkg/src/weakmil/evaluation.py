"""Fold construction, ROC/AUC, confusion matrices and cross-fold aggregation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .exceptions import ConfigurationError, DatasetError, UndefinedMetricError


@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


def make_folds(slide_ids, labels, k: int = 4, seed: int = 0, stratified: bool = True,
               test_size: int | None = None) -> list[FoldSplit]:
    """Split a cohort into ``k`` folds.

    Each class is shuffled and dealt round-robin over the folds, the dealer
    position carrying over between classes so fold sizes differ by at most
    one.  Within a fold the classes are interleaved; ``test_size`` keeps only
    that many slides of each fold as its test set (everything else trains).
    """
    slide_ids = [str(s) for s in slide_ids]
    labels = np.asarray(labels, dtype=np.int64)
    if len(slide_ids) != len(labels):
        raise ConfigurationError(f"{len(slide_ids)} slide ids for {len(labels)} labels")
    if len(set(slide_ids)) != len(slide_ids):
        raise ConfigurationError("slide ids must be unique")
    if k < 2:
        raise ConfigurationError("need at least 2 folds")
    if len(slide_ids) < k:
        raise DatasetError(f"cohort of {len(slide_ids)} slides cannot fill {k} folds")
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise DatasetError("fold construction needs both classes")
    rng = np.random.default_rng(seed)

    groups = [np.flatnonzero(labels == c) for c in classes] if stratified else [np.arange(len(labels))]
    members: list[list[list[int]]] = [[[] for _ in groups] for _ in range(k)]
    dealer = 0
    for g, idx in enumerate(groups):
        for i in rng.permutation(idx):
            members[dealer][g].append(int(i))
            dealer = (dealer + 1) % k

    folds = []
    for f in range(k):
        order = []
        for j in range(max(len(m) for m in members[f])):
            order.extend(m[j] for m in members[f] if j < len(m))
        if test_size is not None:
            if not 1 <= test_size <= len(order):
                raise ConfigurationError(
                    f"test_size {test_size} does not fit fold {f} of {len(order)} slides"
                )
            order = order[:test_size]
        test = set(order)
        folds.append(FoldSplit(
            f,
            tuple(slide_ids[i] for i in range(len(slide_ids)) if i not in test),
            tuple(slide_ids[i] for i in order),
        ))
    return folds


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ConfigurationError(f"{scores.size} scores for {labels.size} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise ConfigurationError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """ROC points ``(fpr, tpr, thresholds)`` with tied scores merged into one step.

    The first point is ``(0, 0)`` at threshold ``+inf``.
    """
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC is undefined unless both classes are present")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr, np.r_[np.inf, s[ends]]


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the tie-merged ROC curve.

    Merging ties into diagonal segments makes this equal to
    ``P(s+ > s-) + P(s+ == s-) / 2``.
    """
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Counts with a positive call iff ``score >= threshold``."""
    scores, labels = _check_binary(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def ppv_npv(cm: ConfusionMatrix) -> tuple[float | None, float | None]:
    """Positive and negative predictive value; ``None`` where the denominator is zero."""
    ppv = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else None
    npv = cm.tn / (cm.tn + cm.fn) if cm.tn + cm.fn else None
    return ppv, npv


@dataclass
class MetricsReport:
    fold_aucs: list[float]
    mean_auc: float
    std_auc: float
    max_auc: float
    ppv: float | None = None
    npv: float | None = None
    confusion: ConfusionMatrix | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confusion"] = asdict(self.confusion) if self.confusion is not None else None
        return d


def aggregate(fold_aucs, cm: ConfusionMatrix | None = None) -> MetricsReport:
    """Mean, population standard deviation and max of per-fold AUCs.

    ``cm`` (usually the sum of per-fold matrices) supplies PPV and NPV.
    """
    aucs = [float(a) for a in fold_aucs]
    if not aucs:
        raise ConfigurationError("aggregate needs at least one fold")
    arr = np.asarray(aucs)
    ppv, npv = ppv_npv(cm) if cm is not None else (None, None)
    return MetricsReport(aucs, float(arr.mean()), float(arr.std(ddof=0)), float(arr.max()), ppv, npv, cm)


# -- outputs ----------------------------------------------------------------------


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_fold_csv(rows, path) -> None:
    """``rows`` are ``(fold, auc, ppv, npv)``; undefined values are written empty."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "auc", "ppv", "npv"])
        for fold, auc, ppv, npv in rows:
            w.writerow([fold, _fmt(auc), _fmt(ppv), _fmt(npv)])


def write_summary_json(report: MetricsReport, path, extra: dict | None = None) -> None:
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_roc_csv(scores, labels, path) -> None:
    fpr, tpr, _ = roc_curve(scores, labels)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for a, b in zip(fpr, tpr):
            w.writerow([repr(float(a)), repr(float(b))])


def write_confusion_csv(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", "pred_neg", "pred_pos"])
        w.writerow(["true_neg", cm.tn, cm.fp])
        w.writerow(["true_pos", cm.fn, cm.tp])


def render_confusion_png(cm: ConfusionMatrix, path, cell: int = 96) -> None:
    """2x2 matrix, rows true (neg, pos), columns predicted; shade darker with count."""
    counts = np.array([[cm.tn, cm.fp], [cm.fn, cm.tp]])
    peak = max(int(counts.max()), 1)
    img = Image.new("RGB", (2 * cell, 2 * cell), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    for r in range(2):
        for c in range(2):
            shade = 255 - int(round(200 * counts[r, c] / peak))
            box = (c * cell, r * cell, (c + 1) * cell - 1, (r + 1) * cell - 1)
            draw.rectangle(box, fill=(shade, shade, 255), outline=(0, 0, 0))
            ink = (255, 255, 255) if shade < 128 else (0, 0, 0)
            draw.text((c * cell + cell // 2 - 8, r * cell + cell // 2 - 6), str(counts[r, c]), fill=ink)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
