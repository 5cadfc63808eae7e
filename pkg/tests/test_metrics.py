import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from chanboost import metrics
from chanboost.metrics import ConfusionCounts, ImageSegmentation
from chanboost.models import build_classifier, extract_features
from chanboost.tensor import Tensor
from conftest import tiny_classifier_config

# --------------------------------------------------------------------------
# confusion and detection figures


def test_confusion_examples():
    c = metrics.confusion_from_predictions([0.9, 0.2, 0.7, 0.1], [1, 0, 1, 0])
    assert (c.fp, c.fn, c.total) == (0, 0, 4)
    c = metrics.confusion_from_predictions(np.full(7, 0.99), np.ones(7), threshold=1.1)
    assert (c.tp, c.fn) == (0, 7)
    assert metrics.confusion_from_predictions([0.5], [1]).tp == 1
    with pytest.raises(ValueError):
        metrics.confusion_from_predictions([], [])


def test_confusion_matches_tally_loop(rng):
    s = rng.random(1000)
    y = rng.integers(0, 2, 1000)
    for thr in (0.1, 0.5, 0.77):
        c = metrics.confusion_from_predictions(s, y, thr)
        assert (c.tp, c.tn, c.fp, c.fn) == oracles.confusion(s, y, thr)


def test_raising_threshold_never_adds_positives(rng):
    s, y = rng.random(300), rng.integers(0, 2, 300)
    prev = None
    for thr in np.linspace(0, 1, 41):
        c = metrics.confusion_from_predictions(s, y, thr)
        if prev is not None:
            assert c.tp <= prev.tp and c.fp <= prev.fp
        prev = c


def test_perfect_single_class_detection():
    r = metrics.detection_metrics(ConfusionCounts(40, 0, 0, 0))
    assert r.accuracy == r.precision == r.recall == r.f_score == 1.0
    assert r.mcc == 0.0 and "mcc" in r.degenerate


def test_balanced_confusion():
    r = metrics.detection_metrics(ConfusionCounts(25, 25, 25, 25))
    assert r.accuracy == 0.5 and r.mcc == 0.0 and not r.degenerate


def test_detection_formulas_match_rational_oracle():
    r = metrics.detection_metrics(ConfusionCounts(50, 40, 5, 5))
    ref = oracles.detection(50, 40, 5, 5)
    for name, value in ref.items():
        assert abs(getattr(r, name) - value) <= 1e-12, name


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.integers(0, 10_000)] * 4).filter(lambda t: sum(t) > 0))
def test_detection_figures_are_bounded_and_exact(counts):
    r = metrics.detection_metrics(ConfusionCounts(*counts))
    ref = oracles.detection(*counts)
    for name in ("accuracy", "precision", "recall", "specificity", "f_score"):
        assert 0.0 <= getattr(r, name) <= 1.0
        assert abs(getattr(r, name) - ref[name]) <= 1e-12
    assert -1.0 <= r.mcc <= 1.0 and abs(r.mcc - ref["mcc"]) <= 1e-12


# --------------------------------------------------------------------------
# curves


def test_separated_scores_give_unit_areas():
    s, y = [0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]
    assert metrics.roc_curve(s, y)[1] == 1.0
    assert metrics.pr_curve(s, y)[1] == 1.0


def test_coin_flip_scores_give_chance_auc():
    g = np.random.default_rng(2024)
    s, y = g.random(10_000), g.integers(0, 2, 10_000)
    assert 0.45 <= metrics.roc_curve(s, y)[1] <= 0.55


def test_reversed_scores_complement_the_auc(rng):
    s, y = rng.random(500), rng.integers(0, 2, 500)
    s[::7] = 0.5  # ties included
    a = metrics.roc_curve(s, y)[1]
    assert abs(metrics.roc_curve(-s, y)[1] - (1 - a)) <= 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_roc_auc_equals_mann_whitney(seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(10, 201))
    s = np.round(g.random(n), 1 if seed % 2 else 6)
    y = g.integers(0, 2, n)
    y[:2] = [0, 1]
    assert abs(metrics.roc_curve(s, y)[1] - oracles.mann_whitney_auc(s, y)) <= 1e-10


def test_roc_curve_shape(rng):
    s, y = rng.random(50), rng.integers(0, 2, 50)
    y[:2] = [0, 1]
    curve, _ = metrics.roc_curve(s, y)
    assert curve.x[0] == 0.0 and curve.y[0] == 0.0 and curve.x[-1] == 1.0 and curve.y[-1] == 1.0
    assert np.all(np.diff(curve.x) >= 0)
    assert curve.to_csv().splitlines()[0] == "threshold,x,y"


def test_tied_scores_share_one_threshold():
    curve, auc = metrics.roc_curve([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
    assert len(curve.x) == 2 and auc == 0.5


def test_curve_preconditions():
    with pytest.raises(ValueError):
        metrics.roc_curve([0.2, 0.4], [1, 1])
    with pytest.raises(ValueError):
        metrics.pr_curve([0.2, 0.4], [0, 0])
    _, ap = metrics.pr_curve([0.2, 0.4], [1, 1])
    assert ap == 1.0


def test_average_precision_by_hand():
    # ranking: P N P N -> precision 1, 1/2, 2/3, 1/2 at recall 1/2, 1/2, 1, 1
    _, ap = metrics.pr_curve([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
    assert abs(ap - (0.5 * 1.0 + 0.5 * 2 / 3)) <= 1e-15


# --------------------------------------------------------------------------
# overlap


def test_overlap_examples():
    m = np.zeros((6, 6), bool)
    m[1:4, 1:4] = True
    assert metrics.iou(m, m) == metrics.dice(m, m) == 1.0
    other = np.zeros_like(m)
    other[5, 5] = True
    assert metrics.iou(m, other) == metrics.dice(m, other) == 0.0
    flags = []
    assert metrics.dice(np.zeros((3, 3)), np.zeros((3, 3)), flags) == 1.0 and flags == ["dice"]
    with pytest.raises(ValueError):
        metrics.iou(np.zeros((3, 3)), np.zeros((3, 4)))


@pytest.mark.parametrize("seed", range(20))
def test_overlap_matches_pixel_sets(seed):
    g = np.random.default_rng(seed)
    a, b = g.random((16, 16)) > g.random(), g.random((16, 16)) > g.random()
    assert metrics.iou(a, b) == oracles.iou(a, b) == metrics.iou(b, a)
    assert metrics.dice(a, b) == oracles.dice(a, b) == metrics.dice(b, a)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_jaccard_identity(seed):
    g = np.random.default_rng(seed)
    a, b = g.random((12, 12)) > 0.5, g.random((12, 12)) > 0.5
    a[0, 0] = True
    j = metrics.iou(a, b)
    assert abs(metrics.dice(a, b) - 2 * j / (1 + j)) <= 1e-12


# --------------------------------------------------------------------------
# boundary F-score


def _square(size=32, top=8, left=8, side=12):
    m = np.zeros((size, size), bool)
    m[top : top + side, left : left + side] = True
    return m


def test_boundary_extraction_matches_neighbour_rule(rng):
    m = rng.random((20, 20)) > 0.4
    got = {tuple(p) for p in np.argwhere(metrics.mask_boundary(m))}
    assert got == set(oracles.boundary(m))


def test_bf_identity_and_one_pixel_shift():
    m = _square()
    assert metrics.bf_score(m, m) == 1.0
    assert metrics.bf_score(m, _square(left=9), tolerance=1.0) == 1.0


@pytest.mark.parametrize("shift,tol", [(5, 2.0), (3, 1.5), (2, 0.5)])
def test_bf_translated_square_matches_all_pairs_oracle(shift, tol):
    a, b = _square(), _square(top=8 + shift, left=8 + shift // 2)
    got = metrics.bf_score(a, b, tolerance=tol)
    assert abs(got - oracles.bf_score(a, b, tol)) <= 1e-12
    assert got == metrics.bf_score(b, a, tolerance=tol)
    assert 0.0 < got < 1.0


def test_bf_default_tolerance_and_degenerate_cases():
    a, b = _square(), _square(left=9)
    diag = math.hypot(32, 32)
    assert metrics.bf_score(a, b) == oracles.bf_score(a, b, 0.0075 * diag)
    flags = []
    assert metrics.bf_score(np.zeros((4, 4)), np.zeros((4, 4)), flags=flags) == 1.0 and flags == ["bf"]
    assert metrics.bf_score(a, np.zeros_like(a)) == 0.0


# --------------------------------------------------------------------------
# aggregation and intervals


def _synthetic(iou_values, class_pixels, correct):
    dice = [2 * j / (1 + j) for j in iou_values]
    return ImageSegmentation(dice, list(iou_values), [1.0] * len(iou_values), correct, class_pixels,
                             sum(class_pixels), sum(correct))


def test_weighted_and_mean_iou():
    im = _synthetic([1.0, 0.5], [90, 10], [90, 5])
    r = metrics.aggregate_segmentation([im], class_frequencies=(0.9, 0.1))
    assert abs(r.mean_iou - 0.75) <= 1e-15 and abs(r.weighted_iou - 0.95) <= 1e-15


def test_perfect_single_class_aggregate():
    labels = np.zeros((8, 8), int)
    im = metrics.score_image(labels, labels, num_classes=1)
    r = metrics.aggregate_segmentation([im], class_names=("covid",))
    assert r.global_accuracy == r.mean_accuracy == r.mean_iou == r.weighted_iou == r.mean_bf_score == 1.0


def test_aggregate_matches_pixel_tally(rng):
    preds = [rng.integers(0, 2, (10, 12)) for _ in range(5)]
    truths = [rng.integers(0, 2, (10, 12)) for _ in range(5)]
    r = metrics.aggregate_segmentation([metrics.score_image(p, t, tolerance=1.0) for p, t in zip(preds, truths)])
    correct = total = 0
    per_class = {0: [0, 0], 1: [0, 0]}
    for p, t in zip(preds, truths):
        for i in range(10):
            for j in range(12):
                total += 1
                correct += p[i, j] == t[i, j]
                per_class[t[i, j]][0] += p[i, j] == t[i, j]
                per_class[t[i, j]][1] += 1
    assert r.global_accuracy == correct / total
    recall = [per_class[k][0] / per_class[k][1] for k in (0, 1)]
    assert abs(r.mean_accuracy - np.mean(recall)) <= 1e-15
    ious = [np.mean([oracles.iou(p == k, t == k) for p, t in zip(preds, truths)]) for k in (0, 1)]
    freq = [per_class[k][1] / total for k in (0, 1)]
    assert abs(r.mean_iou - np.mean(ious)) <= 1e-12
    assert abs(r.weighted_iou - np.dot(freq, ious)) <= 1e-12
    covid = r.classes["covid"]
    d = np.mean([oracles.dice(p == 1, t == 1) for p, t in zip(preds, truths)])
    assert abs(covid.dice - d) <= 1e-12
    assert abs(covid.dice_se - oracles.confidence_interval(1 - d, 5)) <= 1e-15


def test_confidence_interval_examples():
    assert metrics.confidence_interval(0.0, 10) == 0.0
    assert abs(metrics.confidence_interval(0.5, 1) - 0.98) <= 1e-15
    ci = metrics.confidence_interval(0.036, 265)
    assert abs(ci - oracles.confidence_interval(0.036, 265)) <= 1e-15
    assert round(ci, 4) == 0.0224
    with pytest.raises(ValueError):
        metrics.confidence_interval(1.5, 3)
    with pytest.raises(ValueError):
        metrics.confidence_interval(0.1, 0)


# --------------------------------------------------------------------------
# PCA


def test_line_data_is_rank_one():
    t = np.linspace(-2, 3, 40)
    x = np.outer(t, [1.0, -2.0, 0.5]) + [4.0, 1.0, -1.0]
    p = metrics.pca_project(x, k=3)
    assert p.rank_deficient and len(p.components) == 1
    assert abs(p.explained_variance[0] - 100.0) <= 1e-9


def test_isotropic_gaussian_splits_variance_evenly():
    x = np.random.default_rng(99).normal(size=(10_000, 2))
    p = metrics.pca_project(x, k=2)
    assert np.all(np.abs(p.explained_variance - 50.0) <= 2.0)


@pytest.mark.parametrize("seed", range(5))
def test_pca_matches_covariance_eigenvectors(seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=(60, 6)) @ np.diag([5.0, 3.0, 2.0, 1.0, 0.5, 0.2]) @ np.linalg.qr(g.normal(size=(6, 6)))[0]
    p = metrics.pca_project(x, k=3)
    xc = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(xc.T @ xc / 59)
    for i in range(3):
        ref = vecs[:, -1 - i]
        ref = ref if ref[np.argmax(np.abs(ref))] > 0 else -ref
        assert np.max(np.abs(p.components[i] - ref)) <= 1e-6
        assert abs(p.explained_variance[i] - vals[-1 - i] / vals.sum() * 100) <= 1e-8
    assert np.max(np.abs(p.components @ p.components.T - np.eye(3))) <= 1e-9
    assert p.explained_variance.sum() <= 100.0
    assert all(c[np.argmax(np.abs(c))] > 0 for c in p.components)


def test_full_rank_projection_reconstructs():
    x = np.random.default_rng(3).normal(size=(30, 4))
    p = metrics.pca_project(x, k=4)
    assert np.max(np.abs(p.coordinates @ p.components + p.mean - x)) <= 1e-8


def test_pca_preconditions():
    with pytest.raises(ValueError):
        metrics.pca_project(np.zeros((3, 5)), k=3)


def test_classifier_features_project_like_the_eigen_oracle():
    model = build_classifier(tiny_classifier_config(), 1)
    feats = extract_features(model, Tensor(np.random.default_rng(8).random((12, 3, 32, 32))))
    p = metrics.pca_project(feats, k=2)
    xc = feats - feats.mean(axis=0)
    vals, vecs = np.linalg.eigh(xc.T @ xc / (len(feats) - 1))
    for i in range(len(p.components)):
        assert abs(abs(p.components[i] @ vecs[:, -1 - i]) - 1.0) <= 1e-6
        assert abs(p.explained_variance[i] - vals[-1 - i] / vals.sum() * 100) <= 1e-6
