import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from chanboost.data import (
    COVID,
    HEALTHY,
    AffineDraw,
    AugmentationSpec,
    NiftiFormatError,
    PairingError,
    SliceRecord,
    SplitError,
    UnsupportedDatatypeError,
    VolumeRecord,
    augment,
    label_from_mask,
    read_manifest,
    read_nifti,
    read_nifti_volume,
    resize_bilinear,
    resize_nearest,
    sample_augmentation,
    slice_volume,
    split_dataset,
    write_manifest,
    write_nifti,
)
from chanboost.data.images import apply_augmentation, load_image, load_mask, save_image, save_mask
from chanboost.tensor import RngState

# --------------------------------------------------------------------------
# NIfTI


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_nifti_round_trip_is_bit_exact(tmp_path, dtype, suffix):
    g = np.random.default_rng(0)
    if dtype is np.float32:
        vox = g.normal(size=(4, 4, 2)).astype(np.float32)
    else:
        info = np.iinfo(dtype)
        vox = g.integers(info.min, info.max, size=(5, 3, 2), endpoint=True).astype(dtype)
    path = tmp_path / f"v{suffix}"
    write_nifti(path, vox)
    got = read_nifti(path)
    assert got.dtype == vox.dtype and got.shape == vox.shape
    assert got.tobytes() == vox.tobytes()
    if suffix.endswith(".gz"):
        assert path.read_bytes()[:2] == b"\x1f\x8b"


def _big_endian_nifti(vox: np.ndarray, slope=0.0, inter=0.0) -> bytes:
    """Hand-assembled big-endian int16 header, independent of the writer."""
    hdr = bytearray(348)
    hdr[0:4] = struct.pack(">i", 348)
    hdr[40:56] = struct.pack(">8h", 3, *vox.shape, 1, 1, 1, 1)
    hdr[70:74] = struct.pack(">2h", 4, 16)
    hdr[108:112] = struct.pack(">f", 352.0)
    hdr[112:120] = struct.pack(">2f", slope, inter)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x00" * 4 + vox.astype(">i2").tobytes(order="F")


def test_byte_swapped_header_is_detected(tmp_path):
    vox = np.arange(24, dtype=np.int16).reshape(2, 3, 4) * 300 - 3000
    (tmp_path / "be.nii").write_bytes(_big_endian_nifti(vox))
    np.testing.assert_array_equal(read_nifti(tmp_path / "be.nii"), vox)
    (tmp_path / "be.nii.gz").write_bytes(gzip.compress(_big_endian_nifti(vox)))
    np.testing.assert_array_equal(read_nifti(tmp_path / "be.nii.gz"), vox)
    write_nifti(tmp_path / "w.nii", vox, byteorder=">")
    raw = (tmp_path / "w.nii").read_bytes()
    assert struct.unpack(">i", raw[:4]) == (348,) and raw[352:] == vox.astype(">i2").tobytes(order="F")
    np.testing.assert_array_equal(read_nifti(tmp_path / "w.nii"), vox)


def test_scaling_is_applied(tmp_path):
    vox = np.full((2, 2, 1), 3, dtype=np.int16)
    (tmp_path / "s.nii").write_bytes(_big_endian_nifti(vox, slope=2.0, inter=1.0))
    np.testing.assert_array_equal(read_nifti(tmp_path / "s.nii"), np.full((2, 2, 1), 7.0))
    write_nifti(tmp_path / "t.nii", vox, scl_slope=2.0, scl_inter=1.0)
    np.testing.assert_array_equal(read_nifti(tmp_path / "t.nii"), np.full((2, 2, 1), 7.0))


def test_nifti_format_errors(tmp_path):
    vox = np.zeros((2, 2, 2), dtype=np.int16)
    raw = bytearray(_big_endian_nifti(vox))
    raw[344:348] = b"ni1\x00"
    (tmp_path / "m.nii").write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError, match="magic"):
        read_nifti(tmp_path / "m.nii")
    raw = bytearray(_big_endian_nifti(vox))
    raw[70:74] = struct.pack(">2h", 64, 64)
    (tmp_path / "d.nii").write_bytes(bytes(raw))
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti(tmp_path / "d.nii")
    (tmp_path / "short.nii").write_bytes(b"\x00" * 20)
    with pytest.raises(NiftiFormatError):
        read_nifti(tmp_path / "short.nii")
    with pytest.raises(UnsupportedDatatypeError):
        write_nifti(tmp_path / "x.nii", np.zeros((2, 2, 2), dtype=np.float64))


def test_volume_with_mask(tmp_path):
    vox = np.arange(18, dtype=np.int16).reshape(3, 3, 2)
    mask = np.zeros((3, 3, 2), dtype=np.uint8)
    mask[1, 1, 1] = 1
    write_nifti(tmp_path / "v.nii.gz", vox)
    write_nifti(tmp_path / "m.nii.gz", mask)
    rec = read_nifti_volume(tmp_path / "v.nii.gz", tmp_path / "m.nii.gz")
    assert rec.value_range == (0.0, 17.0)
    np.testing.assert_array_equal(rec.mask, mask)
    with pytest.raises(ValueError):
        VolumeRecord(vox, mask=np.zeros((3, 3, 3)))


# --------------------------------------------------------------------------
# slicing


def test_slicing_normalises_and_replicates():
    g = np.random.default_rng(1)
    vox = g.integers(-1000, 400, size=(6, 5, 2)).astype(np.int16)
    mask = (g.random((6, 5, 2)) > 0.6).astype(np.uint8) * 3
    recs = slice_volume(VolumeRecord(vox, "/data/case07.nii.gz", mask))
    assert len(recs) == 2
    lo, hi = vox.min(), vox.max()
    for z, rec in enumerate(recs):
        assert rec.id == f"case07:{z}" and rec.image.shape == (5, 6, 3)
        np.testing.assert_allclose(rec.image[:, :, 0], (vox[:, :, z].T - lo) / (hi - lo), rtol=0, atol=1e-15)
        np.testing.assert_array_equal(rec.image[:, :, 0], rec.image[:, :, 2])
        assert set(np.unique(rec.mask)) <= {0, 1}
        assert np.count_nonzero(rec.mask) == np.count_nonzero(mask[:, :, z])
        assert rec.label == label_from_mask(mask[:, :, z])


def test_constant_volume_gives_zero_planes():
    recs = slice_volume(VolumeRecord(np.full((3, 3, 2), 9.0), "c.nii"), label=HEALTHY)
    assert all(np.all(r.image == 0.0) for r in recs)


def test_slicing_errors():
    rec = VolumeRecord(np.zeros((2, 2, 2)), "v.nii")
    rec.mask = np.zeros((2, 2, 3))
    with pytest.raises(PairingError):
        slice_volume(rec)
    with pytest.raises(ValueError):
        slice_volume(VolumeRecord(np.zeros((2, 2, 2)), "v.nii"))


@pytest.mark.parametrize("mask,threshold,label", [
    (np.zeros((4, 4)), 1, HEALTHY),
    (np.eye(4)[:1].reshape(2, 2), 1, COVID),
    (np.r_[np.ones(9), np.zeros(7)].reshape(4, 4), 10, HEALTHY),
    (np.r_[np.ones(10), np.zeros(6)].reshape(4, 4), 10, COVID),
])
def test_label_from_mask(mask, threshold, label):
    assert label_from_mask(mask, threshold) == label


# --------------------------------------------------------------------------
# resizing


def test_resize_identity_and_constant():
    img = np.random.default_rng(2).random((5, 7, 3))
    np.testing.assert_array_equal(resize_bilinear(img, (5, 7)), img)
    np.testing.assert_allclose(resize_bilinear(np.full((5, 7), 0.3), (9, 4)), 0.3, rtol=0, atol=1e-15)


def test_checkerboard_matches_scalar_oracle():
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.max(np.abs(resize_bilinear(board, (3, 3)) - oracles.bilinear(board, 3, 3))) <= 1e-12
    g = np.random.default_rng(3)
    for shape, target in [((7, 5), (3, 11)), ((4, 9), (13, 2)), ((1, 1), (3, 3))]:
        img = g.random(shape)
        assert np.max(np.abs(resize_bilinear(img, target) - oracles.bilinear(img, *target))) <= 1e-12


def test_nearest_resize_keeps_masks_binary():
    mask = (np.random.default_rng(4).random((17, 13)) > 0.5).astype(np.uint8)
    out = resize_nearest(mask, (304, 304))
    assert out.shape == (304, 304) and set(np.unique(out)) <= {0, 1}
    np.testing.assert_array_equal(resize_nearest(resize_nearest(mask, (34, 26)), (17, 13)), mask)


# --------------------------------------------------------------------------
# augmentation


def _record(size=48, seed=5, radius=None):
    g = np.random.default_rng(seed)
    img = g.random((size, size, 3))
    yy, xx = np.mgrid[:size, :size] - (size - 1) / 2
    r = radius if radius is not None else size / 4
    mask = (yy**2 + xx**2 <= r * r).astype(np.uint8)
    return SliceRecord(img, mask, COVID, "v", 0)


def test_identity_draw():
    rec = _record()
    out = apply_augmentation(rec, AffineDraw(0.0, 0.0, False, False))
    np.testing.assert_array_equal(out.image, rec.image)
    np.testing.assert_array_equal(out.mask, rec.mask)


def test_flip_is_an_involution():
    rec = _record(size=31)
    flip = AffineDraw(0.0, 0.0, True, False)
    once = apply_augmentation(rec, flip)
    np.testing.assert_array_equal(once.image, rec.image[:, ::-1])
    twice = apply_augmentation(once, flip)
    np.testing.assert_array_equal(twice.image, rec.image)
    np.testing.assert_array_equal(twice.mask, rec.mask)
    both = apply_augmentation(rec, AffineDraw(0.0, 0.0, True, True))
    np.testing.assert_array_equal(both.image, rec.image[::-1, ::-1])


@pytest.mark.parametrize("seed", range(10))
def test_rotated_disc_keeps_its_area(seed):
    rec = _record(size=96, radius=24)
    draw = sample_augmentation(AugmentationSpec(), RngState(seed))
    out = apply_augmentation(rec, draw)
    # a centred disc maps onto itself under rotation and flips; shear has unit determinant
    expected = np.count_nonzero(rec.mask)
    assert abs(np.count_nonzero(out.mask) - expected) <= 0.05 * expected
    assert set(np.unique(out.mask)) <= {0, 1}


def test_augment_preserves_label_and_shape():
    rec = _record()
    out = augment(rec, AugmentationSpec(), RngState(0, 200, 0, 3))
    assert out.label == rec.label and out.image.shape == rec.image.shape and out.mask.shape == rec.mask.shape
    assert np.all(np.isfinite(out.image)) and out.image.min() >= 0 and out.image.max() <= 1 + 1e-12
    again = augment(rec, AugmentationSpec(), RngState(0, 200, 0, 3))
    np.testing.assert_array_equal(out.image, again.image)


def test_ten_thousand_draws_stay_in_range():
    spec = AugmentationSpec()
    g = RngState(123)
    draws = [sample_augmentation(spec, g) for _ in range(10_000)]
    rot = np.array([d.rotation for d in draws])
    shear = np.array([d.shear for d in draws])
    assert np.all(np.abs(rot) <= 30.0) and np.all(np.abs(shear) <= 0.05)
    fx = np.mean([d.flip_x for d in draws])
    fy = np.mean([d.flip_y for d in draws])
    assert abs(fx - 0.5) < 0.03 and abs(fy - 0.5) < 0.03


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augmented_masks_stay_binary(seed):
    rec = _record(size=24, seed=seed % 97)
    out = augment(rec, AugmentationSpec(), RngState(seed))
    assert set(np.unique(out.mask)) <= {0, 1}


# --------------------------------------------------------------------------
# splits


def _grouped_ids(total, seed, lo=5, hi=30):
    g = np.random.default_rng(seed)
    ids, v = [], 0
    while len(ids) < total:
        size = min(int(g.integers(lo, hi + 1)), total - len(ids))
        ids += [f"vol{v}"] * size
        v += 1
    return ids


@pytest.mark.parametrize("seed", range(5))
def test_split_is_a_grouped_partition(seed):
    ids = _grouped_ids(400, seed)
    split = split_dataset(ids, seed)
    parts = [set(split.train), set(split.validation), set(split.test)]
    assert set().union(*parts) == set(range(400))
    assert sum(map(len, parts)) == 400
    owner = {}
    for name, part in zip(("train", "validation", "test"), parts):
        for i in part:
            assert owner.setdefault(ids[i], name) == name


def test_detection_split_size_matches_published_count():
    ids = _grouped_ids(2684, 7)
    biggest = max(ids.count(v) for v in set(ids))
    split = split_dataset(ids, 0)
    assert abs(len(split.test) - 538) <= biggest
    remaining = 2684 - len(split.test)
    assert abs(len(split.validation) - 0.2 * remaining) <= biggest


def test_split_is_deterministic_and_seed_sensitive():
    ids = _grouped_ids(300, 1)
    a, b = split_dataset(ids, 4), split_dataset(ids, 4)
    assert (a.train, a.validation, a.test) == (b.train, b.validation, b.test)
    assert split_dataset(ids, 5).test != a.test


def test_split_errors():
    with pytest.raises(SplitError):
        split_dataset(["a", "b", "c", "d"], 0)
    with pytest.raises(SplitError):
        split_dataset(["a"] * 5 + ["b"] * 5, 0)


# --------------------------------------------------------------------------
# files


def test_manifest_round_trip(tmp_path):
    entries = [{"id": "v:0", "path": "slices/v_0000.png", "label": COVID, "split": "train", "mask_path": "m.png"},
               {"id": "v:1", "path": "slices/v_0001.png", "label": HEALTHY, "split": "test"}]
    write_manifest(tmp_path / "manifest.jsonl", entries)
    got = read_manifest(tmp_path / "manifest.jsonl")
    assert [{k: v for k, v in e.items() if k != "_base"} for e in got] == entries
    (tmp_path / "bad.jsonl").write_text('{"id": "x", "path": "p", "label": "Flu", "split": "train"}\n')
    with pytest.raises(ValueError, match="label"):
        read_manifest(tmp_path / "bad.jsonl")


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_eight_bit_images_round_trip(tmp_path, suffix):
    levels = np.random.default_rng(6).integers(0, 256, size=(9, 7)) / 255.0
    save_image(tmp_path / f"i{suffix}", np.repeat(levels[:, :, None], 3, axis=2))
    np.testing.assert_array_equal(load_image(tmp_path / f"i{suffix}")[:, :, 1], levels)
    mask = (levels > 0.5).astype(np.uint8)
    save_mask(tmp_path / f"m{suffix}", mask)
    np.testing.assert_array_equal(load_mask(tmp_path / f"m{suffix}"), mask)
