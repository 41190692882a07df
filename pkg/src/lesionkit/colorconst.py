"""Shades-of-gray illuminant estimation and diagonal (von Kries) correction."""
from __future__ import annotations

import decimal
import math
from dataclasses import dataclass

import numpy as np

from .imgcore import DataError, RgbImage

GRAY = 1.0 / math.sqrt(3.0)


class DegenerateIlluminantError(DataError):
    pass


@dataclass(frozen=True)
class Illuminant:
    """Unit-norm estimate of the scene illuminant color."""

    e_r: float
    e_g: float
    e_b: float

    def __post_init__(self):
        v = self.as_array()
        if not np.all(v > 0):
            raise DegenerateIlluminantError(f"illuminant components must be positive: {tuple(v)}")
        if abs(float(v @ v) - 1.0) > 1e-9:
            raise DataError(f"illuminant is not unit-norm (|e|^2 = {float(v @ v)!r})")

    @classmethod
    def from_vector(cls, v) -> Illuminant:
        v = np.asarray(v, dtype=np.float64)
        n = float(np.sqrt(v @ v))
        if not n > 0:
            raise DegenerateIlluminantError("zero illuminant vector")
        v = v / n
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.e_r, self.e_g, self.e_b])


def _pixels(image) -> np.ndarray:
    # float arrays are taken as already-normalized values; uint8 rasters are
    # divided by 255
    a = image.data if isinstance(image, RgbImage) else np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DataError(f"expected (h, w, 3) image, got {a.shape}")
    if a.dtype == np.uint8:
        return a.reshape(-1, 3).astype(np.float64) / 255.0
    return a.reshape(-1, 3).astype(np.float64)


def estimate_illuminant(image, p: float = 6.0) -> Illuminant:
    """Minkowski p-norm estimate: e_c ~ (mean I_c**p) ** (1/p), L2 normalized.

    ``p = 1`` is gray-world, large ``p`` tends to max-RGB.
    """
    if not p >= 1:
        raise DataError(f"Minkowski order p must be >= 1, got {p}")
    a = image.data if isinstance(image, RgbImage) else np.asarray(image)
    if p == 1 and a.dtype == np.uint8 and a.ndim == 3 and a.shape[2] == 3:
        return _gray_world_u8(a)
    x = _pixels(image)
    peak = x.max(axis=0)
    if np.any(peak <= 0):
        ch = "RGB"[int(np.argmin(peak))]
        raise DegenerateIlluminantError(f"channel {ch} is identically zero")
    # dividing by the per-channel peak keeps x**p away from underflow for large p
    y = x / peak
    norms = peak * np.mean(y**p, axis=0) ** (1.0 / p)
    return Illuminant.from_vector(norms)


def _gray_world_u8(a) -> Illuminant:
    # exact integer channel sums, normalized at high precision so each
    # component is the correctly rounded value of S_c / ||S||
    sums = [int(v) for v in a.reshape(-1, 3).sum(axis=0, dtype=np.int64)]
    if min(sums) == 0:
        raise DegenerateIlluminantError(f"channel {'RGB'[sums.index(0)]} is identically zero")
    with decimal.localcontext() as ctx:
        ctx.prec = 100
        norm = decimal.Decimal(sum(v * v for v in sums)).sqrt()
        e = [float(decimal.Decimal(v) / norm) for v in sums]
    return Illuminant(*e)


def gains(illum: Illuminant) -> np.ndarray:
    return GRAY / illum.as_array()


def correct(image: RgbImage, illum: Illuminant) -> RgbImage:
    """Scale each channel so the illuminant maps onto equal-energy gray."""
    x = image.data.astype(np.float64) * gains(illum)
    return RgbImage(np.clip(np.round(x), 0, 255).astype(np.uint8))


def normalize(image: RgbImage, p: float = 6.0) -> RgbImage:
    return correct(image, estimate_illuminant(image, p))
