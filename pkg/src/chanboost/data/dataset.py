"""Slice records, label derivation, patient-grouped splits and manifests."""

from __future__ import annotations

import json
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..fileio import atomic_write_bytes
from ..tensor import RngState
from .images import load_image, load_mask, resize_bilinear, resize_nearest
from .nifti import VolumeRecord

COVID, HEALTHY = "COVID", "Healthy"
LABELS = (HEALTHY, COVID)  # class index 0, 1

_CLASS_ALIASES = {
    "covid": COVID, "covid19": COVID, "covid-19": COVID, "infected": COVID, "positive": COVID,
    "healthy": HEALTHY, "normal": HEALTHY, "noncovid": HEALTHY, "non-covid": HEALTHY, "negative": HEALTHY,
}


class PairingError(ValueError):
    pass


class SplitError(ValueError):
    pass


def class_index(label: str) -> int:
    return LABELS.index(label)


def canonical_label(name: str) -> str | None:
    return _CLASS_ALIASES.get(name.strip().lower().replace("_", "-"))


@dataclass
class SliceRecord:
    image: np.ndarray  # H x W x 3 in [0, 1]
    mask: np.ndarray | None
    label: str
    volume_id: str
    slice_index: int
    path: str | None = None
    mask_path: str | None = None

    @property
    def id(self) -> str:
        return f"{self.volume_id}:{self.slice_index}"


def label_from_mask(mask, threshold: int = 1) -> str:
    return COVID if int(np.count_nonzero(mask)) >= threshold else HEALTHY


def slice_volume(volume: VolumeRecord, volume_id: str | None = None, label: str | None = None,
                 threshold: int = 1) -> list[SliceRecord]:
    """One record per axial index, min-max normalised over the whole volume.

    A constant volume normalises to all zeros. Without a mask the caller
    must supply ``label``.
    """
    vox = np.asarray(volume.voxels, dtype=np.float64)
    if vox.shape[2] < 1:
        raise ValueError("volume has no slices")
    if volume.mask is not None and volume.mask.shape != vox.shape:
        raise PairingError(f"mask shape {volume.mask.shape} differs from image {vox.shape}")
    lo, hi = vox.min(), vox.max()
    norm = np.zeros_like(vox) if hi == lo else (vox - lo) / (hi - lo)
    vid = volume_id or Path(volume.source).name.split(".")[0]
    out = []
    for z in range(vox.shape[2]):
        plane = norm[:, :, z].T
        mask = None
        if volume.mask is not None:
            mask = (np.asarray(volume.mask)[:, :, z].T > 0).astype(np.uint8)
        lab = label_from_mask(mask, threshold) if mask is not None and label is None else label
        if lab is None:
            raise ValueError(f"no mask or label for volume {vid}")
        out.append(SliceRecord(np.repeat(plane[:, :, None], 3, axis=2), mask, lab, vid, z))
    return out


def resize_record(rec: SliceRecord, size: tuple[int, int]) -> SliceRecord:
    mask = resize_nearest(rec.mask, size) if rec.mask is not None else None
    return SliceRecord(resize_bilinear(rec.image, size), mask, rec.label, rec.volume_id, rec.slice_index,
                       rec.path, rec.mask_path)


# --------------------------------------------------------------------------
# Splitting


@dataclass
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]
    seed: int
    test_fraction: float = 0.20
    validation_fraction: float = 0.20

    def assignment(self) -> dict[int, str]:
        out = {}
        for name in ("train", "validation", "test"):
            for i in getattr(self, name):
                out[i] = name
        return out


def _take_groups(groups: list[tuple[str, list[int]]], target: int) -> tuple[list[int], list[tuple[str, list[int]]]]:
    taken: list[int] = []
    rest = []
    for gid, members in groups:
        if len(taken) < target:
            taken.extend(members)
        else:
            rest.append((gid, members))
    return taken, rest


def split_dataset(records: Sequence, seed: int, test_fraction: float = 0.20,
                  validation_fraction: float = 0.20) -> DatasetSplit:
    """Seeded, group-preserving train/validation/test partition.

    ``records`` are :class:`SliceRecord` objects or plain volume ids; whole
    volumes are assigned, so each fraction is met to within one group.
    """
    group_ids = [r.volume_id if isinstance(r, SliceRecord) else str(r) for r in records]
    n = len(group_ids)
    if n < 5:
        raise SplitError(f"need at least 5 records, got {n}")
    grouped: OrderedDict[str, list[int]] = OrderedDict()
    for i, g in enumerate(group_ids):
        grouped.setdefault(g, []).append(i)
    if len(grouped) < 3:
        raise SplitError(f"need at least 3 groups to fill train/validation/test, got {len(grouped)}")
    order = RngState(seed).generator.permutation(len(grouped))
    keys = list(grouped)
    groups = [(keys[k], grouped[keys[k]]) for k in order]
    test, rest = _take_groups(groups, round(test_fraction * n))
    remaining = sum(len(m) for _, m in rest)
    val, rest = _take_groups(rest, round(validation_fraction * remaining))
    train = [i for _, m in rest for i in m]
    if not train or not val or not test:
        raise SplitError("too few groups to populate every split")
    return DatasetSplit(sorted(train), sorted(val), sorted(test), seed, test_fraction, validation_fraction)


# --------------------------------------------------------------------------
# Manifests (one JSON object per line)


def write_manifest(path, entries: Iterable[dict]) -> None:
    lines = [json.dumps(e, sort_keys=True) for e in entries]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_manifest(path) -> list[dict]:
    entries = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        for key in ("id", "path", "label", "split"):
            if key not in e:
                raise ValueError(f"{path}:{lineno}: missing key {key!r}")
        if e["label"] not in LABELS:
            raise ValueError(f"{path}:{lineno}: unknown label {e['label']!r}")
        e["_base"] = str(base)
        entries.append(e)
    return entries


def load_manifest_records(entries: Sequence[dict], size: tuple[int, int] | None = None,
                          require_mask: bool = False) -> list[SliceRecord]:
    records = []
    for e in entries:
        base = Path(e.get("_base", "."))
        img_path = base / e["path"]
        image = load_image(img_path)
        mask = None
        if e.get("mask_path"):
            mask = load_mask(base / e["mask_path"])
        elif require_mask:
            raise ValueError(f"record {e['id']} has no mask")
        vid, _, idx = e["id"].rpartition(":")
        rec = SliceRecord(image, mask, e["label"], vid or e["id"], int(idx) if idx.isdigit() else 0,
                          str(img_path), e.get("mask_path"))
        if size is not None and image.shape[:2] != tuple(size):
            rec = resize_record(rec, size)
        records.append(rec)
    return records


def class_counts(labels: Iterable[str]) -> dict[str, int]:
    c = Counter(labels)
    return {lab: c.get(lab, 0) for lab in LABELS}
