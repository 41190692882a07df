"""Seeded data augmentation: flips, scale jitter, color jitter, class balancing.

Every random decision for plan entry ``index`` comes from a generator seeded
with ``(seed, index)``, so an augmented corpus does not depend on the order in
which entries are produced.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .imgcore import CLASSES, BinaryMask, DataError, RgbImage

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugmentSpec:
    flip_horizontal: bool = True
    flip_vertical: bool = True
    scale_enabled: bool = True
    scale_low: float = 0.8
    scale_high: float = 1.2
    color_jitter_enabled: bool = True
    brightness_max_delta: float = 64 / 255
    contrast_max_delta: float = 0.75
    saturation_max_delta: float = 0.25
    hue_max_delta: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.scale_low <= self.scale_high):
            raise DataError(
                f"scale range must satisfy 0 < low <= high, got [{self.scale_low}, {self.scale_high}]"
            )
        for name in ("brightness_max_delta", "contrast_max_delta",
                     "saturation_max_delta", "hue_max_delta"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        if self.hue_max_delta > 0.5:
            raise DataError("hue_max_delta must be <= 0.5 (fraction of a full turn)")
        if not (0 <= self.seed < 2**64):
            raise DataError("seed must be an unsigned 64-bit integer")

    @classmethod
    def segmentation(cls, seed=0) -> AugmentSpec:
        """Lesion segmentation setting: flips, scale and color jitter."""
        return cls(seed=seed)

    @classmethod
    def classification(cls, seed=0) -> AugmentSpec:
        """Disease classification setting: images are color-normalized, so no jitter."""
        return cls(color_jitter_enabled=False, seed=seed)

    @classmethod
    def disabled(cls, seed=0) -> AugmentSpec:
        return cls(flip_horizontal=False, flip_vertical=False, scale_enabled=False,
                   color_jitter_enabled=False, seed=seed)

    @classmethod
    def from_mapping(cls, values: dict) -> AugmentSpec:
        """Build from string key=value pairs; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise DataError(f"unknown augmentation key {key!r}")
            default = getattr(cls(), key)
            kwargs[key] = _parse_value(raw, type(default), key)
        return cls(**kwargs)


def _parse_value(raw, kind, key):
    if not isinstance(raw, str):
        return kind(raw)
    s = raw.strip()
    try:
        if kind is bool:
            lowered = s.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if kind is int:
            return int(s, 0)
        if "/" in s:
            num, den = s.split("/", 1)
            return float(num) / float(den)
        return float(s)
    except ValueError:
        raise DataError(f"bad value {raw!r} for {key}") from None


@dataclass(frozen=True)
class AugmentParams:
    """One concrete draw of augmentation parameters."""

    flip_h: bool = False
    flip_v: bool = False
    scale: float = 1.0
    jitter: tuple = (0.0, 0.0, 0.0, 0.0)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_N_VARIATES = 7


def _splitmix64(x):
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def entry_uniforms(seed: int, index) -> np.ndarray:
    """Uniform [0, 1) variates for plan entries, shape (len(index), 7).

    A stateless hash of (seed, index, k): the value for an entry never depends
    on which other entries were drawn, or in what order.
    """
    idx = np.atleast_1d(np.asarray(index, dtype=np.uint64))
    key = _splitmix64(_splitmix64(np.uint64(seed)) ^ _splitmix64(idx))
    with np.errstate(over="ignore"):
        k = np.arange(1, _N_VARIATES + 1, dtype=np.uint64) * _GOLDEN
        z = _splitmix64(key[:, None] + k[None, :])
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _params_from_uniforms(spec: AugmentSpec, u) -> AugmentParams:
    jitter = tuple(float(2.0 * v - 1.0) for v in u[3:7])
    return AugmentParams(
        flip_h=bool(u[0] < 0.5) and spec.flip_horizontal,
        flip_v=bool(u[1] < 0.5) and spec.flip_vertical,
        scale=float(spec.scale_low + u[2] * (spec.scale_high - spec.scale_low))
        if spec.scale_enabled else 1.0,
        jitter=jitter if spec.color_jitter_enabled else (0.0,) * 4,
    )


def draw_params(spec: AugmentSpec, index: int) -> AugmentParams:
    # all variates are always drawn, so toggling one transform does not
    # change the others
    return _params_from_uniforms(spec, entry_uniforms(spec.seed, index)[0])


# --------------------------------------------------------------------------
# geometry


def _as_array(x):
    return x.data if isinstance(x, (RgbImage, BinaryMask)) else np.asarray(x)


def _rewrap(like, arr):
    if isinstance(like, RgbImage):
        return RgbImage(arr)
    if isinstance(like, BinaryMask):
        return BinaryMask(arr)
    return arr


def flip_h(image):
    return _rewrap(image, _as_array(image)[:, ::-1].copy())


def flip_v(image):
    return _rewrap(image, _as_array(image)[::-1].copy())


def scaled_size(width: int, height: int, factor: float) -> tuple[int, int]:
    if factor <= 0:
        raise DataError(f"scale factor must be positive, got {factor}")
    w, h = round(width * factor), round(height * factor)
    if w < 1 or h < 1:
        raise DataError(f"scale factor {factor} collapses {width}x{height} to {w}x{h}")
    return w, h


def _bilinear_axis(n_in, n_out):
    # half-pixel centres: output pixel i samples source coordinate
    # (i + 0.5) * n_in / n_out - 0.5, clamped to the valid range
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, x - i0


def resize_bilinear(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample of an (h, w[, c]) array; returns float64."""
    h, w = arr.shape[:2]
    a = arr.astype(np.float64)
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    extra = (1,) * (a.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def nearest_source_index(n_in, n_out):
    # floor((i + 1/2) * n_in / n_out) in integers, so exact hits on a pixel
    # edge are not lost to rounding
    idx = ((2 * np.arange(n_out, dtype=np.int64) + 1) * n_in) // (2 * n_out)
    return np.minimum(idx, n_in - 1).astype(np.intp)


def resize_nearest(arr: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    h, w = arr.shape[:2]
    return arr[nearest_source_index(h, out_h)][:, nearest_source_index(w, out_w)]


def fit_to(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Center-crop or reflect-pad ``arr`` back to ``height`` x ``width``."""
    h, w = arr.shape[:2]
    if h > height:
        top = (h - height) // 2
        arr = arr[top:top + height]
    if w > width:
        left = (w - width) // 2
        arr = arr[:, left:left + width]
    h, w = arr.shape[:2]
    if h < height or w < width:
        pad_y = (height - h) // 2, height - h - (height - h) // 2
        pad_x = (width - w) // 2, width - w - (width - w) // 2
        pads = [pad_y, pad_x] + [(0, 0)] * (arr.ndim - 2)
        arr = np.pad(arr, pads, mode="reflect" if min(h, w) > 1 else "edge")
    return arr


def scale(image, factor: float, nearest: bool = False):
    """Resample by ``factor`` then crop/pad back to the original size."""
    a = _as_array(image)
    h, w = a.shape[:2]
    nw, nh = scaled_size(w, h, factor)
    if (nw, nh) == (w, h) and factor == 1.0:
        return _rewrap(image, a.copy())
    if nearest or isinstance(image, BinaryMask):
        out = resize_nearest(a, nw, nh)
    else:
        out = resize_bilinear(a, nw, nh)
        if a.dtype == np.uint8:
            out = np.clip(np.round(out), 0, 255).astype(np.uint8)
    return _rewrap(image, fit_to(out, w, h))


# --------------------------------------------------------------------------
# color


def color_jitter(image: RgbImage, spec: AugmentSpec, draw) -> RgbImage:
    """Brightness, contrast, saturation, hue, in that order, clamped after each."""
    d = [float(v) for v in draw]
    if len(d) != 4 or any(not (-1.0 <= v <= 1.0) for v in d):
        raise DataError(f"jitter draw must be 4 values in [-1, 1], got {draw}")
    x = image.data.astype(np.float64) / 255.0

    if d[0]:
        x = np.clip(x + d[0] * spec.brightness_max_delta, 0.0, 1.0)
    if d[1]:
        m = float((x @ LUMA).mean())
        x = np.clip(m + (x - m) * (1.0 + d[1] * spec.contrast_max_delta), 0.0, 1.0)
    if d[2]:
        y = (x @ LUMA)[..., None]
        x = np.clip(y + (x - y) * (1.0 + d[2] * spec.saturation_max_delta), 0.0, 1.0)
    if d[3]:
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = np.mod(hsv[..., 0] + d[3] * spec.hue_max_delta, 1.0)
        x = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)

    return RgbImage(np.round(x * 255.0).astype(np.uint8))


# --------------------------------------------------------------------------
# composition


def apply_params(image: RgbImage, mask: BinaryMask | None, spec: AugmentSpec,
                 params: AugmentParams):
    if mask is not None and mask.shape != (image.height, image.width):
        raise DataError(
            f"mask {mask.width}x{mask.height} does not match image {image.width}x{image.height}"
        )
    if params.flip_h:
        image = flip_h(image)
        mask = flip_h(mask) if mask is not None else None
    if params.flip_v:
        image = flip_v(image)
        mask = flip_v(mask) if mask is not None else None
    if params.scale != 1.0:
        image = scale(image, params.scale)
        mask = scale(mask, params.scale) if mask is not None else None
    if any(params.jitter):
        image = color_jitter(image, spec, params.jitter)
    return image, mask


def apply(image: RgbImage, mask: BinaryMask | None, spec: AugmentSpec, index: int):
    """Augment one (image, mask) pair deterministically from ``(spec.seed, index)``."""
    return apply_params(image, mask, spec, draw_params(spec, index))


# --------------------------------------------------------------------------
# class balancing


@dataclass(frozen=True)
class PlanEntry:
    image: str
    label: str
    entry_index: int
    params: AugmentParams


@dataclass(frozen=True)
class SamplePlan:
    entries: tuple
    seed: int = 0

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.label] = out.get(e.label, 0) + 1
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "class", "entry_index"])
            for e in self.entries:
                w.writerow([e.image, e.label, e.entry_index])


def _class_order(labels):
    present = set(labels)
    known = [c for c in CLASSES if c in present]
    return known + sorted(present - set(CLASSES))


def balance_plan(labels: dict, target_per_class: int = 20000, seed: int = 0,
                 spec: AugmentSpec | None = None, classes=None) -> SamplePlan:
    """Oversample every class to exactly ``target_per_class`` entries.

    Each class's images are shuffled (seeded) and cycled until the target is
    reached. Entries are numbered consecutively, class by class, and each
    carries its own parameter draw from ``(seed, entry_index)``. Passing
    ``classes`` makes a class without images an error instead of absent.
    """
    if target_per_class < 1:
        raise DataError("target_per_class must be positive")
    if not labels:
        raise DataError("no labelled images to balance")
    spec = replace(spec or AugmentSpec(), seed=seed)
    by_class: dict[str, list] = {}
    for image, label in labels.items():
        by_class.setdefault(label, []).append(image)

    entries = []
    index = 0
    total = target_per_class * len(by_class)
    uniforms = entry_uniforms(seed, np.arange(total))
    for label in classes or ():
        by_class.setdefault(label, [])
    for ci, label in enumerate(_class_order(by_class)):
        images = sorted(by_class[label])
        if not images:
            raise DataError(f"class {label!r} has no images")
        order = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([seed, ci]))
        ).permutation(len(images))
        for k in range(target_per_class):
            image = images[order[k % len(images)]]
            entries.append(PlanEntry(image, label, index,
                                     _params_from_uniforms(spec, uniforms[index])))
            index += 1
    return SamplePlan(tuple(entries), seed)


def read_plan_csv(path) -> list[tuple[str, str, int]]:
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != [
            "image", "class", "entry_index"
        ]:
            raise DataError(f"{path}: header must be image,class,entry_index")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((row["image"].strip(), row["class"].strip(),
                             int(row["entry_index"])))
            except (ValueError, AttributeError):
                raise DataError(f"{path}:{lineno}: malformed plan row {row}") from None
    if not rows:
        raise DataError(f"{path}: plan is empty")
    return rows
