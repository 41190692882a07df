"""Raster and tabular carriers shared by the whole pipeline, plus file IO.

All containers hold read-only numpy arrays and validate their invariants on
construction, so an instance that exists is a valid instance.
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CLASSES = ("MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC")
ATTRIBUTES = (
    "pigment_network",
    "negative_network",
    "streaks",
    "milia_like_cyst",
    "globules",
)
PMAP_MAGIC = b"PMAP"


class DataError(ValueError):
    """Input data violates a contract (shape, range, format, pairing)."""


class FormatError(DataError):
    """A file could not be decoded into the requested type."""


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RgbImage:
    """8-bit sRGB raster, shape (height, width, 3)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3 or a.shape[2] != 3:
            raise DataError(f"RGB image must have shape (h, w, 3), got {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise DataError("RGB image must be at least 1x1")
        if a.dtype != np.uint8:
            raise DataError(f"RGB image must be uint8, got {a.dtype}")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel {0, 1} mask, shape (height, width), dtype uint8."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {a.shape}")
        if a.dtype == bool:
            a = a.astype(np.uint8)
        if a.size and not np.isin(a, (0, 1)).all():
            raise DataError("mask values must be 0 or 1")
        object.__setattr__(self, "data", _frozen(a.astype(np.uint8, copy=False)))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ProbMap:
    """Channel-interleaved probability raster, shape (height, width, channels).

    Float32 payloads (as stored in PMAP files) are kept as float32 so that
    round trips are bit-exact; anything else is converted to float64.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] < 1:
            raise DataError(f"probability map must have shape (h, w, c), got {a.shape}")
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float64)
        if a.size and not (np.all(a >= 0.0) and np.all(a <= 1.0)):
            raise DataError("probability values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel(self, c: int) -> np.ndarray:
        return self.data[:, :, c]


@dataclass(frozen=True)
class ClassDistribution:
    probs: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.probs)
        if len(p) != len(CLASSES):
            raise DataError(f"expected {len(CLASSES)} class probabilities, got {len(p)}")
        if any(not (0.0 <= v <= 1.0) or math.isnan(v) for v in p):
            raise DataError(f"class probabilities must lie in [0, 1]: {p}")
        if abs(math.fsum(p) - 1.0) > 1e-6:
            raise DataError(f"class probabilities sum to {math.fsum(p)!r}, not 1")
        object.__setattr__(self, "probs", p)

    def __getitem__(self, name: str) -> float:
        return self.probs[CLASSES.index(name)]

    def argmax(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest canonical index
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i, j] = number of samples with true class i predicted as j."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((7, 7), np.int64))

    def __post_init__(self):
        c = np.asarray(self.counts)
        n = len(CLASSES)
        if c.shape != (n, n):
            raise DataError(f"confusion matrix must be {n}x{n}, got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer):
            if not np.all(np.equal(np.mod(c, 1), 0)):
                raise DataError("confusion matrix entries must be integers")
        c = c.astype(np.int64)
        if (c < 0).any():
            raise DataError("confusion matrix entries must be non-negative")
        object.__setattr__(self, "counts", _frozen(c))

    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


# --------------------------------------------------------------------------
# masks


def load_mask_png(path) -> BinaryMask:
    """Read an 8-bit grayscale PNG; pixels >= 128 become 1."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mask file not found: {path}")
    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: not a PNG file (format {im.format})")
        if im.mode != "L":
            raise FormatError(
                f"{path}: mask must be 8-bit single-channel grayscale, got mode {im.mode!r}"
            )
        arr = np.asarray(im)
    return BinaryMask((arr >= 128).astype(np.uint8))


def save_mask_png(mask: BinaryMask, path) -> None:
    arr = (mask.data * 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path), format="PNG")


# --------------------------------------------------------------------------
# probability maps


def encode_pmap(prob: ProbMap) -> bytes:
    h, w, c = prob.data.shape
    payload = np.ascontiguousarray(prob.data, dtype="<f4").tobytes()
    return PMAP_MAGIC + struct.pack("<III", w, h, c) + payload


def decode_pmap(buf: bytes, name="<buffer>") -> ProbMap:
    if len(buf) < 16 or buf[:4] != PMAP_MAGIC:
        raise FormatError(f"{name}: bad PMAP magic")
    w, h, c = struct.unpack("<III", buf[4:16])
    if w < 1 or h < 1 or c < 1:
        raise FormatError(f"{name}: PMAP dimensions must be positive, got {w}x{h}x{c}")
    need = w * h * c * 4
    if len(buf) - 16 < need:
        raise FormatError(f"{name}: truncated PMAP payload ({len(buf) - 16} of {need} bytes)")
    if len(buf) - 16 > need:
        raise FormatError(f"{name}: trailing bytes after PMAP payload")
    arr = np.frombuffer(buf, dtype="<f4", offset=16, count=w * h * c)
    arr = arr.astype(np.float32).reshape(h, w, c)
    bad = ~((arr >= 0.0) & (arr <= 1.0))
    if bad.any():
        y, x, ch = np.argwhere(bad)[0]
        raise FormatError(
            f"{name}: value {arr[y, x, ch]!r} at (x={x}, y={y}, c={ch}) outside [0, 1]"
        )
    return ProbMap(arr)


def save_probmap(prob: ProbMap, path) -> None:
    Path(path).write_bytes(encode_pmap(prob))


def load_probmap(path) -> ProbMap:
    """Load a PMAP file or a 16-bit grayscale PNG (value / 65535)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"probability map not found: {path}")
    buf = path.read_bytes()
    if buf[:4] == PMAP_MAGIC:
        return decode_pmap(buf, str(path))
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        with Image.open(io.BytesIO(buf)) as im:
            if im.mode not in ("I;16", "I;16B", "I;16L"):
                raise FormatError(
                    f"{path}: probability PNG must be 16-bit grayscale, got mode {im.mode!r}"
                )
            arr = np.asarray(im).astype(np.float64) / 65535.0
        return ProbMap(arr[:, :, None])
    raise FormatError(f"{path}: bad magic, neither PMAP nor PNG")


def save_probmap_png16(prob: ProbMap, path) -> None:
    if prob.channels != 1:
        raise DataError("16-bit PNG probability maps are single-channel")
    arr = np.round(prob.data[:, :, 0].astype(np.float64) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(Path(path), format="PNG")


# --------------------------------------------------------------------------
# RGB images


def load_rgb(path) -> RgbImage:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB image, got mode {im.mode!r}")
        return RgbImage(np.array(im))


def save_rgb(image: RgbImage, path) -> None:
    Image.fromarray(image.data, mode="RGB").save(Path(path), format="PNG")


# --------------------------------------------------------------------------
# classification tables


def read_class_table(path, columns=CLASSES) -> dict[str, tuple]:
    """Read ``image,<columns...>`` CSV into {image: tuple of floats}.

    Column order in the file may differ from ``columns``; values are returned
    in ``columns`` order.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"table not found: {path}")
    rows: dict[str, tuple] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty table") from None
        if not header or header[0] != "image":
            raise FormatError(f"{path}: first column must be 'image', got {header[:1]}")
        missing = [c for c in columns if c not in header]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}")
        extra = [c for c in header[1:] if c not in columns]
        if extra:
            raise FormatError(f"{path}: unexpected columns {extra}")
        idx = [header.index(c) for c in columns]
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            image = row[0].strip()
            try:
                vals = tuple(float(row[i]) for i in idx)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno} (image {image}): {exc}") from None
            if image in rows:
                raise FormatError(f"{path}:{lineno}: duplicate image id {image!r}")
            rows[image] = vals
    return rows


def format_float(v: float) -> str:
    return repr(float(v))


def write_class_table(rows, path_or_fh, columns=CLASSES) -> None:
    """Write {image: values} sorted by image id."""
    own = not hasattr(path_or_fh, "write")
    fh = open(path_or_fh, "w", newline="") if own else path_or_fh
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", *columns])
        for image in sorted(rows):
            w.writerow([image, *(format_float(v) for v in rows[image])])
    finally:
        if own:
            fh.close()
