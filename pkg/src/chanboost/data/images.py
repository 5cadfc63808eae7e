"""Resampling, on-the-fly affine augmentation and 8-bit image files."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from ..fileio import atomic_write_bytes
from ..tensor import RngState


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centre mapping from output to input coordinates."""
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an H x W or H x W x C float image."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    th, tw = size
    if th < 1 or tw < 1 or h < 1 or w < 1:
        raise ValueError("image dimensions must be >= 1")
    if (h, w) == (th, tw):
        return img.copy()
    ys = np.clip(_source_coords(th, h), 0, h - 1)
    xs = np.clip(_source_coords(tw, w), 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if img.ndim == 3:
        wy, wx = wy[..., None], wx[..., None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    m = np.asarray(mask)
    h, w = m.shape[:2]
    th, tw = size
    if (h, w) == (th, tw):
        return m.copy()
    ys = np.minimum(np.floor((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    xs = np.minimum(np.floor((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return m[ys][:, xs]


# --------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_degrees: float = 30.0
    shear: float = 0.05
    flip_probability: float = 0.5


@dataclass(frozen=True)
class AffineDraw:
    rotation: float  # degrees
    shear: float
    flip_x: bool
    flip_y: bool

    def matrix(self) -> np.ndarray:
        """2x2 forward map on (row, col) offsets from the image centre."""
        t = math.radians(self.rotation)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        shear = np.array([[1.0, 0.0], [self.shear, 1.0]])
        flip = np.diag([-1.0 if self.flip_y else 1.0, -1.0 if self.flip_x else 1.0])
        return rot @ shear @ flip


def sample_augmentation(spec: AugmentationSpec, rng: RngState) -> AffineDraw:
    g = rng.generator
    return AffineDraw(
        rotation=float(g.uniform(-spec.rotation_degrees, spec.rotation_degrees)),
        shear=float(g.uniform(-spec.shear, spec.shear)),
        flip_x=bool(g.random() < spec.flip_probability),
        flip_y=bool(g.random() < spec.flip_probability),
    )


def _inverse_coords(shape: tuple[int, int], draw: AffineDraw) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    inv = np.linalg.inv(draw.matrix())
    rr, cc = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src = inv @ np.stack([rr.ravel(), cc.ravel()])
    return (src[0] + cy).reshape(h, w), (src[1] + cx).reshape(h, w)


def _clean(coord: np.ndarray) -> np.ndarray:
    # snap float noise so pure flips/identity sample exact pixel centres
    r = np.round(coord)
    return np.where(np.abs(coord - r) < 1e-9, r, coord)


def warp_bilinear(image: np.ndarray, draw: AffineDraw) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    ys, xs = map(_clean, _inverse_coords((h, w), draw))
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    out = np.zeros_like(img)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wy * wx > 0)
            wgt = np.where(ok, wy * wx, 0.0)
            vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += (wgt[..., None] if img.ndim == 3 else wgt) * vals
    return out


def warp_nearest(mask: np.ndarray, draw: AffineDraw) -> np.ndarray:
    m = np.asarray(mask)
    h, w = m.shape[:2]
    ys, xs = _inverse_coords((h, w), draw)
    yi, xi = np.floor(_clean(ys) + 0.5).astype(int), np.floor(_clean(xs) + 0.5).astype(int)
    ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
    out = np.zeros_like(m)
    out[ok] = m[yi[ok], xi[ok]]
    return out


def apply_augmentation(record, draw: AffineDraw):
    mask = warp_nearest(record.mask, draw) if record.mask is not None else None
    return replace(record, image=warp_bilinear(record.image, draw), mask=mask)


def augment(record, spec: AugmentationSpec, rng: RngState):
    """Random rotation, shear and axis flips applied identically to image and mask."""
    return apply_augmentation(record, sample_augmentation(spec, rng))


# --------------------------------------------------------------------------
# 8-bit image files (PNG / PGM)


def load_image(path) -> np.ndarray:
    """H x W x 3 float image in [0, 1] from an 8-bit grayscale or RGB file."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA", "P", "LA"):
            raise ValueError(f"{path}: unsupported image mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 0).astype(np.uint8)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """Save a [0, 1] image; grayscale when all channels agree."""
    arr = to_uint8(image)
    if arr.ndim == 3 and np.all(arr == arr[..., :1]):
        arr = arr[..., 0]
    _write_png_or_pgm(path, arr)


def save_mask(path, mask: np.ndarray) -> None:
    _write_png_or_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def _write_png_or_pgm(path, arr: np.ndarray) -> None:
    fmt = "PPM" if Path(path).suffix.lower() in (".pgm", ".ppm") else "PNG"
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format=fmt)
    atomic_write_bytes(path, buf.getvalue())
