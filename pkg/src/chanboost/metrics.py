"""Detection, segmentation and feature-space evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_from_predictions(probabilities, labels, threshold: float = 0.5, positive: int = 1) -> ConfusionCounts:
    """Tally outcomes; a sample is predicted positive iff its score >= threshold."""
    p = np.asarray(probabilities, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0:
        raise ValueError("no predictions to tally")
    if p.shape != y.shape:
        raise ValueError("probabilities and labels differ in length")
    pred = p >= threshold
    truth = y == positive
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)),
        tn=int(np.sum(~pred & ~truth)),
        fp=int(np.sum(pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
    )


@dataclass
class DetectionReport:
    accuracy: float
    precision: float
    recall: float
    specificity: float
    f_score: float
    mcc: float
    roc_auc: float | None = None
    pr_auc: float | None = None
    counts: ConfusionCounts | None = None
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = asdict(self.counts) if self.counts else None
        return d


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def detection_metrics(c: ConfusionCounts) -> DetectionReport:
    if c.total == 0:
        raise ValueError("empty confusion table")
    flags: list[str] = []
    acc = (c.tp + c.tn) / c.total
    prec = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    rec = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    spec = _ratio(c.tn, c.tn + c.fp, "specificity", flags)
    f = _ratio(2 * prec * rec, prec + rec, "f_score", flags)
    # products of counts stay exact as Python ints
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = _ratio(c.tp * c.tn - c.fp * c.fn, math.sqrt(den), "mcc", flags)
    return DetectionReport(acc, prec, rec, spec, f, mcc, counts=c, degenerate=flags)


# --------------------------------------------------------------------------
# Curves


@dataclass
class Curve:
    kind: str
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "x", "y"])
        for t, x, y in zip(self.thresholds, self.x, self.y):
            w.writerow([repr(float(t)), repr(float(x)), repr(float(y))])
        return buf.getvalue()


def _sweep(scores, labels):
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be non-empty and equally long")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last position of each distinct score: ties share one threshold
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[cut].astype(float)
    fps = np.cumsum(~y)[cut].astype(float)
    return s[cut], tps, fps, float(y.sum()), float((~y).sum())


def roc_curve(scores, labels) -> tuple[Curve, float]:
    thr, tps, fps, pos, neg = _sweep(scores, labels)
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs both classes present")
    fpr = np.r_[0.0, fps / neg]
    tpr = np.r_[0.0, tps / pos]
    thresholds = np.r_[np.inf, thr]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return Curve("roc", fpr, tpr, thresholds), auc


def pr_curve(scores, labels) -> tuple[Curve, float]:
    """Precision-recall points and the step-wise average precision."""
    thr, tps, fps, pos, _ = _sweep(scores, labels)
    if pos == 0:
        raise ValueError("PR curve needs at least one positive")
    precision = tps / (tps + fps)
    recall = tps / pos
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    auc = float(np.sum(np.diff(np.r_[0.0, recall]) * envelope))
    curve = Curve("pr", np.r_[0.0, recall], np.r_[1.0, precision], np.r_[np.inf, thr])
    return curve, auc


# --------------------------------------------------------------------------
# Overlap metrics


def _binary_pair(pred, truth):
    a = np.asarray(pred).astype(bool)
    b = np.asarray(truth).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(pred, truth, flags: list | None = None) -> float:
    a, b = _binary_pair(pred, truth)
    union = int(np.sum(a | b))
    if union == 0:
        if flags is not None:
            flags.append("iou")
        return 1.0
    return int(np.sum(a & b)) / union


def dice(pred, truth, flags: list | None = None) -> float:
    a, b = _binary_pair(pred, truth)
    den = int(a.sum()) + int(b.sum())
    if den == 0:
        if flags is not None:
            flags.append("dice")
        return 1.0
    return 2 * int(np.sum(a & b)) / den


def mask_boundary(mask) -> np.ndarray:
    """Mask pixels removed by a 4-connected erosion (outside counts as background)."""
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=0)


def bf_score(pred, truth, tolerance: float | None = None, flags: list | None = None) -> float:
    """Boundary F1: harmonic mean of boundary precision and recall within ``tolerance`` pixels.

    The default tolerance is 0.75% of the image diagonal.
    """
    a, b = _binary_pair(pred, truth)
    if tolerance is None:
        tolerance = 0.0075 * math.hypot(*a.shape)
    ba, bb = mask_boundary(a), mask_boundary(b)
    na, nb = int(ba.sum()), int(bb.sum())
    if na == 0 and nb == 0:
        if flags is not None:
            flags.append("bf")
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    dist_to_b = ndimage.distance_transform_edt(~bb)
    dist_to_a = ndimage.distance_transform_edt(~ba)
    precision = float(np.mean(dist_to_b[ba] <= tolerance))
    recall = float(np.mean(dist_to_a[bb] <= tolerance))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def confidence_interval(error: float, n: int, z: float = 1.96) -> float:
    if not 0.0 <= error <= 1.0:
        raise ValueError("error rate must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    return z * math.sqrt(error * (1 - error) / n)


# --------------------------------------------------------------------------
# Segmentation aggregates


@dataclass
class ClassSummary:
    dice: float
    dice_se: float
    accuracy: float
    iou: float
    bf_score: float


@dataclass
class SegmentationReport:
    classes: dict[str, ClassSummary]
    global_accuracy: float
    mean_accuracy: float
    mean_iou: float
    weighted_iou: float
    mean_bf_score: float
    images: int
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageSegmentation:
    """Per-image, per-class overlap figures used for aggregation."""

    dice: list[float]
    iou: list[float]
    bf: list[float]
    correct: list[int]
    class_pixels: list[int]
    pixels: int
    correct_total: int
    degenerate: list[str] = field(default_factory=list)


def score_image(pred_labels, true_labels, num_classes: int = 2, tolerance: float | None = None) -> ImageSegmentation:
    p = np.asarray(pred_labels)
    t = np.asarray(true_labels)
    if p.shape != t.shape:
        raise ValueError(f"label map shapes differ: {p.shape} vs {t.shape}")
    flags: list[str] = []
    d, j, bf, correct, npx = [], [], [], [], []
    for k in range(num_classes):
        pk, tk = p == k, t == k
        d.append(dice(pk, tk, flags))
        j.append(iou(pk, tk, flags))
        bf.append(bf_score(pk, tk, tolerance, flags))
        correct.append(int(np.sum(pk & tk)))
        npx.append(int(tk.sum()))
    return ImageSegmentation(d, j, bf, correct, npx, p.size, int(np.sum(p == t)), flags)


def aggregate_segmentation(
    images: Sequence[ImageSegmentation],
    class_names: Sequence[str] = ("background", "covid"),
    class_frequencies: Sequence[float] | None = None,
) -> SegmentationReport:
    """Table-style summary over images.

    Per-class accuracy is pooled recall (correct pixels of the class over
    its true pixels); dice/iou/bf are image means; the dice error bar is the
    95% interval half-width with the dice error rate over the image count.
    """
    if not images:
        raise ValueError("no images to aggregate")
    n = len(images)
    k = len(class_names)
    classes = {}
    acc, ious, bfs = [], [], []
    for c, name in enumerate(class_names):
        d = float(np.mean([im.dice[c] for im in images]))
        j = float(np.mean([im.iou[c] for im in images]))
        b = float(np.mean([im.bf[c] for im in images]))
        px = sum(im.class_pixels[c] for im in images)
        a = sum(im.correct[c] for im in images) / px if px else 1.0
        classes[name] = ClassSummary(d, confidence_interval(min(max(1 - d, 0.0), 1.0), n), a, j, b)
        acc.append(a)
        ious.append(j)
        bfs.append(b)
    if class_frequencies is None:
        totals = np.array([sum(im.class_pixels[c] for im in images) for c in range(k)], dtype=float)
        class_frequencies = totals / totals.sum() if totals.sum() else np.full(k, 1.0 / k)
    freq = np.asarray(class_frequencies, dtype=float)
    flags = sorted({f for im in images for f in im.degenerate})
    return SegmentationReport(
        classes=classes,
        global_accuracy=sum(im.correct_total for im in images) / sum(im.pixels for im in images),
        mean_accuracy=float(np.mean(acc)),
        mean_iou=float(np.mean(ious)),
        weighted_iou=float(np.dot(freq, ious) / freq.sum()),
        mean_bf_score=float(np.mean(bfs)),
        images=n,
        degenerate=flags,
    )


# --------------------------------------------------------------------------
# PCA


@dataclass
class PcaProjection:
    components: np.ndarray  # (k, d), rows orthonormal
    explained_variance: np.ndarray  # percent per component
    coordinates: np.ndarray  # (n, k)
    mean: np.ndarray
    rank_deficient: bool = False


def _power_iteration(cov: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    v = rng.normal(size=cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0, v
        w /= norm
        if np.linalg.norm(w - v) < tol:
            return float(w @ cov @ w), w
        v = w
    return float(v @ cov @ v), v


def pca_project(features, k: int = 3, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> PcaProjection:
    """Top-``k`` principal axes by power iteration with deflation.

    Components whose eigenvalue is negligible relative to the total variance
    are dropped and ``rank_deficient`` is set.
    """
    x = np.asarray(features, dtype=float)
    n, d = x.shape
    if n < k + 1 or d < k:
        raise ValueError(f"need at least {k + 1} samples and {k} features")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    comps, values = [], []
    work = cov.copy()
    for _ in range(k):
        lam, v = _power_iteration(work, rng, tol, max_iter)
        if total == 0 or lam <= 1e-12 * total:
            break
        # re-orthogonalise against earlier axes to hold orthonormality tight
        for u in comps:
            v = v - (u @ v) * u
        v /= np.linalg.norm(v)
        lam = float(v @ cov @ v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        comps.append(v)
        values.append(lam)
        work = work - lam * np.outer(v, v)
    comp_arr = np.array(comps).reshape(len(comps), d)
    explained = np.array(values) / total * 100 if total > 0 else np.zeros(len(comps))
    return PcaProjection(comp_arr, explained, xc @ comp_arr.T, mean, rank_deficient=len(comps) < k)
