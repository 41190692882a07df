"""Cross-task combination: attribute masking and three-level disease fusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imgcore import (CLASSES, BinaryMask, ClassDistribution, DataError, ProbMap,
                      read_class_table, write_class_table)

LEVEL1 = ("NV", "OTHER")
LEVEL2 = ("MEL", "BKL", "OTHER")
LEVEL3 = ("BCC", "AKIEC", "DF", "VASC")
LEVELS = (LEVEL1, LEVEL2, LEVEL3)


def refine_attributes(attr: ProbMap, lesion: BinaryMask) -> ProbMap:
    """Zero every attribute channel outside the lesion mask."""
    if (attr.height, attr.width) != lesion.shape:
        raise DataError(
            f"attribute map {attr.width}x{attr.height} does not match lesion mask "
            f"{lesion.width}x{lesion.height}"
        )
    keep = lesion.data.astype(bool)[:, :, None]
    return ProbMap(np.where(keep, attr.data, attr.data.dtype.type(0)))


def _check_level(name, values, expected):
    v = tuple(float(x) for x in values)
    if len(v) != expected:
        raise DataError(f"{name} needs {expected} values, got {len(v)}")
    if any(not (0.0 <= x <= 1.0) for x in v):
        raise DataError(f"{name} values must lie in [0, 1]: {v}")
    if abs(math.fsum(v) - 1.0) > 1e-6:
        raise DataError(f"{name} sums to {math.fsum(v)!r}, not 1")
    return v


@dataclass(frozen=True)
class HierarchyOutputs:
    """level1 over (NV, OTHER); level2 over (MEL, BKL, OTHER); level3 over (BCC, AKIEC, DF, VASC)."""

    level1: tuple
    level2: tuple
    level3: tuple

    def __post_init__(self):
        object.__setattr__(self, "level1", _check_level("level1", self.level1, 2))
        object.__setattr__(self, "level2", _check_level("level2", self.level2, 3))
        object.__setattr__(self, "level3", _check_level("level3", self.level3, 4))


def hierarchy_fuse(h: HierarchyOutputs, hard: bool = False) -> ClassDistribution:
    """Chain the per-level distributions as conditionals.

    Each level is read as a distribution conditioned on the previous level's
    OTHER branch. With ``hard=True`` the argmax at each level routes the
    image and the result is one-hot.
    """
    l1, l2, l3 = h.level1, h.level2, h.level3
    if hard:
        if int(np.argmax(l1)) == 0:
            name = "NV"
        elif int(np.argmax(l2)) < 2:
            name = LEVEL2[int(np.argmax(l2))]
        else:
            name = LEVEL3[int(np.argmax(l3))]
        return ClassDistribution(tuple(float(c == name) for c in CLASSES))

    nv, other1 = l1
    mel, bkl, other2 = l2
    deep = other1 * other2
    p = {
        "NV": nv,
        "MEL": other1 * mel,
        "BKL": other1 * bkl,
        **{name: deep * v for name, v in zip(LEVEL3, l3)},
    }
    return ClassDistribution(tuple(p[c] for c in CLASSES))


def fuse_tables(level1: dict, level2: dict, level3: dict, hard: bool = False) -> dict:
    ids = set(level1)
    if ids != set(level2) or ids != set(level3):
        every = ids | set(level2) | set(level3)
        bad = sorted(i for i in every if not (i in level1 and i in level2 and i in level3))
        raise DataError(f"level tables disagree on image ids, e.g. {bad[:10]}")
    if not ids:
        raise DataError("level tables contain no images")
    out = {}
    for image in sorted(ids):
        try:
            h = HierarchyOutputs(level1[image], level2[image], level3[image])
        except DataError as exc:
            raise DataError(f"image {image!r}: {exc}") from None
        out[image] = hierarchy_fuse(h, hard).probs
    return out


def fuse_csv(level1_csv, level2_csv, level3_csv, out, hard: bool = False) -> dict:
    fused = fuse_tables(
        read_class_table(level1_csv, LEVEL1),
        read_class_table(level2_csv, LEVEL2),
        read_class_table(level3_csv, LEVEL3),
        hard=hard,
    )
    write_class_table(fused, out)
    return fused
