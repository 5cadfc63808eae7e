from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from chanboost.blocks import StmStageSpec
from chanboost.data.dataset import COVID, HEALTHY, SliceRecord
from chanboost.models import CovidCbResegConfig, SbStmBrNetConfig, build_classifier, build_segmenter
from chanboost.training import HyperParams, evaluate, train
from chanboost import metrics, ops
from chanboost.tensor import Tensor


def tiny_classifier_config(size=32) -> SbStmBrNetConfig:
    return SbStmBrNetConfig(
        input_size=(size, size),
        stem_width=4,
        stages=(StmStageSpec(2, 4), StmStageSpec(2, 4), StmStageSpec(2, 4)),
        dropout=0.5,
    )


def tiny_segmenter_config(size=32) -> CovidCbResegConfig:
    return CovidCbResegConfig(input_size=(size, size), encoder_widths=(4, 8))


def disc_images(count, size, seed, lesion_every=2, base=0.0, noise=0.1, boost=0.8,
                centre=(0.3, 0.7), radius=(0.1, 0.2)):
    """Synthetic slices: noisy background plus a bright disc on every ``lesion_every``-th image.

    ``centre`` and ``radius`` are fractions of ``size``.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    out = []
    for i in range(count):
        img = base + noise * rng.random((size, size))
        mask = np.zeros((size, size), dtype=np.uint8)
        if lesion_every and i % lesion_every == lesion_every - 1:
            cy = rng.uniform(centre[0] * size, centre[1] * size)
            cx = rng.uniform(centre[0] * size, centre[1] * size)
            r = rng.uniform(radius[0] * size, radius[1] * size)
            mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
            img = img + boost * mask
        label = COVID if mask.any() else HEALTHY
        out.append(SliceRecord(np.repeat(img[:, :, None], 3, axis=2), mask, label, f"v{i}", 0))
    return out


def classifier_overfit_records():
    recs = disc_images(16, 64, seed=0, centre=(20 / 64, 44 / 64), radius=(6 / 64, 12 / 64))
    return [SliceRecord(r.image, None, r.label, r.volume_id, 0) for r in recs]


def segmenter_overfit_records():
    return disc_images(8, 64, seed=1, lesion_every=1, base=0.3, noise=0.1, boost=0.4)


CLASSIFIER_OVERFIT_CONFIG = SbStmBrNetConfig(
    input_size=(64, 64), stem_width=8,
    stages=(StmStageSpec(4, 8), StmStageSpec(8, 16), StmStageSpec(16, 64)),
)
SEGMENTER_OVERFIT_CONFIG = CovidCbResegConfig(input_size=(64, 64), encoder_widths=(16, 32, 64))


def eval_loss_and_accuracy(model, records):
    preds = evaluate(model, records)
    probs = preds.probabilities[:, :, None, None]
    loss = ops.cross_entropy_loss(Tensor(probs), preds.targets).item()
    acc = float(np.mean(preds.probabilities.argmax(axis=1) == preds.targets))
    return loss, acc


def mean_dice(model, records):
    labels = evaluate(model, records).probabilities.argmax(axis=1)
    return float(np.mean([metrics.dice(labels[i] == 1, records[i].mask == 1) for i in range(len(records))]))


@pytest.fixture(scope="session")
def classifier_overfit_run():
    """200 SGDM steps on 16 images with a full prediction scan after every step."""
    records = classifier_overfit_records()
    model = build_classifier(CLASSIFIER_OVERFIT_CONFIG, seed=0)
    hp = HyperParams(epochs=100)  # 16 images at batch 12: two steps per epoch
    loss0, acc0 = eval_loss_and_accuracy(model, records)
    history = []

    def scan(step, m):
        history.append((step,) + eval_loss_and_accuracy(m, records))
        return False

    started = time.perf_counter()
    report = train(model, records, list(range(16)), [0], hp, seed=0, augmentation=None, step_callback=scan)
    return {"loss0": loss0, "acc0": acc0, "history": history, "report": report,
            "seconds": time.perf_counter() - started, "model": model, "records": records}


@pytest.fixture(scope="session")
def segmenter_overfit_run():
    """300 SGDM steps on 8 lesion images, Dice measured every 25 steps."""
    records = segmenter_overfit_records()
    model = build_segmenter(SEGMENTER_OVERFIT_CONFIG, seed=0)
    hp = HyperParams(epochs=300)  # 8 images at batch 12: one step per epoch
    dice_by_step = {}

    def probe(step, m):
        if step % 25 == 0:
            dice_by_step[step] = mean_dice(m, records)
        return False

    started = time.perf_counter()
    report = train(model, records, list(range(8)), [0], hp, seed=0, augmentation=None, step_callback=probe)
    return {"dice": dice_by_step, "report": report, "seconds": time.perf_counter() - started}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
