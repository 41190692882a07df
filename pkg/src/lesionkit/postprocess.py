"""Segmentation refinement: dense CRF, marker watershed, largest component.

The chain is ``crf_refine -> derive_markers -> watershed -> largest_component``
and operates on a single-channel lesion probability map.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage, sparse

from .augment import resize_bilinear
from .imgcore import BinaryMask, DataError, ProbMap, RgbImage, save_mask_png, save_probmap

EPS = 1e-6
DENSE_LIMIT = 4096


@dataclass(frozen=True)
class CrfParams:
    """Two-kernel Potts CRF settings.

    ``max_window_pairs`` caps the number of (pixel, neighbour) pairs the
    truncated window visits per message pass. Inputs over budget are
    box-downsampled just enough to fit (bandwidths in pixels scale along) and
    the refined map is upsampled bilinearly. ``None`` always runs at full
    resolution.
    """

    iterations: int = 5
    w_spatial: float = 3.0
    sigma_spatial: float = 3.0
    w_bilateral: float = 5.0
    sigma_bilateral_xy: float = 50.0
    sigma_bilateral_rgb: float = 13.0
    kernel_truncation_radius_sigmas: float = 3.0
    max_window_pairs: int | None = 8_000_000

    def __post_init__(self):
        if self.iterations < 0:
            raise DataError("iterations must be >= 0")
        if self.w_spatial < 0 or self.w_bilateral < 0:
            raise DataError("kernel weights must be >= 0")
        if min(self.sigma_spatial, self.sigma_bilateral_xy, self.sigma_bilateral_rgb) <= 0:
            raise DataError("all CRF bandwidths must be > 0")
        if self.kernel_truncation_radius_sigmas <= 0:
            raise DataError("kernel truncation radius must be > 0")
        if self.max_window_pairs is not None and self.max_window_pairs < 1:
            raise DataError("max_window_pairs must be >= 1 or None")

    def radius(self, scale: float = 1.0) -> int:
        sigma = max(self.sigma_spatial, self.sigma_bilateral_xy) * scale
        return math.ceil(self.kernel_truncation_radius_sigmas * sigma)


def window_pairs(h: int, w: int, radius: int) -> int:
    """Ordered neighbour pairs inside a square window of ``radius`` on an h x w grid."""
    ry, rx = min(radius, h - 1), min(radius, w - 1)
    dy = np.arange(-ry, ry + 1)
    dx = np.arange(-rx, rx + 1)
    return int((h - np.abs(dy)).sum() * (w - np.abs(dx)).sum()) - h * w


def working_scale(h: int, w: int, params: CrfParams) -> float:
    """Largest downsampling factor <= 1 whose window stays within budget."""
    budget = params.max_window_pairs
    if budget is None or params.w_bilateral == 0:
        return 1.0
    if window_pairs(h, w, params.radius()) <= budget:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        sh, sw = max(1, round(h * mid)), max(1, round(w * mid))
        if window_pairs(sh, sw, params.radius(mid)) <= budget:
            lo = mid
        else:
            hi = mid
    return max(lo, 1.0 / max(h, w))


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.labels)
        if a.ndim != 2:
            raise DataError(f"label map must be 2-D, got shape {a.shape}")
        if not np.issubdtype(a.dtype, np.integer):
            raise DataError("labels must be integers")
        if a.size and a.min() < 0:
            raise DataError("labels must be non-negative")
        a = np.ascontiguousarray(a, dtype=np.int32)
        a.setflags(write=False)
        object.__setattr__(self, "labels", a)

    @property
    def shape(self):
        return self.labels.shape

    def label_set(self) -> set[int]:
        return set(np.unique(self.labels).tolist()) - {0}


def _single_channel(prob: ProbMap, what="probability map") -> np.ndarray:
    if prob.channels != 1:
        raise DataError(f"{what} must have exactly 1 channel, got {prob.channels}")
    return prob.data[:, :, 0]


def binarize(prob: ProbMap, threshold: float = 0.5) -> BinaryMask:
    return BinaryMask((_single_channel(prob) >= threshold).astype(np.uint8))


# --------------------------------------------------------------------------
# dense CRF


def _spatial_message(q, sigma, radius):
    """sum_j exp(-|p_i - p_j|^2 / 2 sigma^2) q_j over the square window, j != i."""
    h, w = q.shape
    r = min(radius, max(h, w) - 1)
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    out = ndimage.correlate1d(q, k, axis=0, mode="constant", cval=0.0)
    out = ndimage.correlate1d(out, k, axis=1, mode="constant", cval=0.0)
    return out - q


def _half_window_pairs(h, w, radius):
    """Yield (i, j, dy, dx) index arrays covering each unordered window pair once."""
    ry, rx = min(radius, h - 1), min(radius, w - 1)
    xs = np.arange(w)
    for dy in range(0, ry + 1):
        dx = np.arange(1 if dy == 0 else -rx, rx + 1)
        x2 = xs[:, None] + dx[None, :]
        ok = (x2 >= 0) & (x2 < w)
        xi, k = np.nonzero(ok)
        ys = np.arange(h - dy)[:, None]
        i = (ys * w + xi[None, :]).ravel()
        j = ((ys + dy) * w + x2[xi, k][None, :]).ravel()
        yield i, j, dy, np.broadcast_to(dx[k][None, :], (h - dy, k.size)).ravel()


class _TruncatedKernel:
    """Pairwise kernel restricted to a square window, held as a sparse matrix.

    With no bilateral term the spatial Gaussian is applied separably instead.
    """

    def __init__(self, rgb, params: CrfParams, sigma_scale=1.0):
        h, w = rgb.shape[:2]
        self.shape = (h, w)
        self.radius = params.radius(sigma_scale)
        self.w_s = params.w_spatial
        self.sigma_s = params.sigma_spatial * sigma_scale
        self.matrix = None
        if params.w_bilateral == 0:
            return
        sigma_xy = params.sigma_bilateral_xy * sigma_scale
        col = rgb.reshape(-1, 3).astype(np.float64)
        rows, cols, vals = [], [], []
        for i, j, dy, dx in _half_window_pairs(h, w, self.radius):
            d2 = (dy * dy + dx * dx).astype(np.float64)
            diff = col[i] - col[j]
            c2 = np.einsum("ij,ij->i", diff, diff)
            v = params.w_bilateral * np.exp(
                -d2 / (2.0 * sigma_xy**2) - c2 / (2.0 * params.sigma_bilateral_rgb**2)
            )
            if self.w_s > 0:
                v += self.w_s * np.exp(-d2 / (2.0 * self.sigma_s**2))
            rows.append(i)
            cols.append(j)
            vals.append(v)
        n = h * w
        # each unordered pair is stored once; the transpose (a free CSC view)
        # supplies the other direction at multiply time
        if rows:
            m = sparse.coo_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(n, n),
            ).tocsr()
        else:
            m = sparse.csr_matrix((n, n))
        self.matrix = m

    def __call__(self, q):
        if self.matrix is not None:
            v = q.ravel()
            return (self.matrix @ v + self.matrix.T @ v).reshape(self.shape)
        if self.w_s > 0:
            return self.w_s * _spatial_message(q, self.sigma_s, self.radius)
        return np.zeros_like(q)


class _DenseKernel:
    """Explicit N x N pairwise matrix; only for small images."""

    def __init__(self, rgb, params: CrfParams):
        h, w = rgb.shape[:2]
        if h * w > DENSE_LIMIT:
            raise DataError(f"exact dense CRF limited to {DENSE_LIMIT} pixels, got {h * w}")
        yy, xx = np.mgrid[0:h, 0:w]
        pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
        col = rgb.reshape(-1, 3).astype(np.float64)
        d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
        c2 = ((col[:, None, :] - col[None, :, :]) ** 2).sum(-1)
        k = params.w_spatial * np.exp(-d2 / (2 * params.sigma_spatial**2))
        k += params.w_bilateral * np.exp(
            -d2 / (2 * params.sigma_bilateral_xy**2) - c2 / (2 * params.sigma_bilateral_rgb**2)
        )
        np.fill_diagonal(k, 0.0)
        self.k = k
        self.shape = (h, w)

    def __call__(self, q):
        return (self.k @ q.ravel()).reshape(self.shape)


def _mean_field(unary_bg, unary_fg, kernel, iterations):
    # Potts: the cost of label l at i is sum_j k_ij * Q_j(not l)
    q_fg = np.exp(-unary_fg) / (np.exp(-unary_fg) + np.exp(-unary_bg))
    total = kernel(np.ones_like(q_fg))
    for _ in range(iterations):
        s_fg = kernel(q_fg)
        e_fg = unary_fg + (total - s_fg)
        e_bg = unary_bg + s_fg
        # logistic of the energy gap, written to avoid overflow
        q_fg = 0.5 * (1.0 + np.tanh(0.5 * (e_bg - e_fg)))
    return q_fg


def _box_resize(arr, w, h):
    if arr.ndim == 3:
        return np.asarray(Image.fromarray(arr).resize((w, h), Image.BOX))
    return np.asarray(Image.fromarray(arr.astype(np.float32), mode="F").resize((w, h), Image.BOX))


def crf_refine(image: RgbImage, prob: ProbMap, params: CrfParams = CrfParams(),
               exact: bool = False) -> ProbMap:
    """Mean-field inference of a binary (background, lesion) dense CRF.

    Unary energies are -log of the (clamped) input probabilities; pairwise
    energies are a Potts model over a Gaussian spatial kernel plus a bilateral
    kernel on position and RGB. Updates are synchronous, so the result does not
    depend on evaluation order. ``exact=True`` uses the full N x N kernel.
    """
    p = _single_channel(prob)
    if p.shape != (image.height, image.width):
        raise DataError(
            f"probability map {p.shape[1]}x{p.shape[0]} does not match image "
            f"{image.width}x{image.height}"
        )
    if params.iterations == 0:
        return prob

    h, w = p.shape
    rgb = image.data
    pw = np.clip(p.astype(np.float64), EPS, 1.0 - EPS)
    factor = 1.0 if exact else working_scale(h, w, params)
    if factor != 1.0:
        sw, sh = max(1, round(w * factor)), max(1, round(h * factor))
        rgb = _box_resize(rgb, sw, sh)
        pw = np.clip(_box_resize(pw, sw, sh).astype(np.float64), EPS, 1.0 - EPS)

    kernel = _DenseKernel(rgb, params) if exact else _TruncatedKernel(rgb, params, factor)
    q = _mean_field(-np.log1p(-pw), -np.log(pw), kernel, params.iterations)
    if factor != 1.0:
        q = resize_bilinear(q, w, h)
    return ProbMap(np.clip(q, 0.0, 1.0)[:, :, None])


# --------------------------------------------------------------------------
# watershed


def derive_markers(prob: ProbMap, fg_threshold: float = 0.8,
                   bg_threshold: float = 0.2) -> LabelMap:
    """Seeds: 2 where p >= fg_threshold, 1 where p <= bg_threshold, else 0."""
    if not fg_threshold > bg_threshold:
        raise DataError(
            f"fg_threshold ({fg_threshold}) must exceed bg_threshold ({bg_threshold})"
        )
    p = _single_channel(prob)
    labels = np.zeros(p.shape, np.int32)
    labels[p <= bg_threshold] = 1
    labels[p >= fg_threshold] = 2
    return LabelMap(labels)


def watershed(elevation, markers: LabelMap) -> LabelMap:
    """Marker-based priority flood over the 4-neighbourhood.

    Pixels are processed in increasing flood level, where a pixel's level is
    the larger of its own elevation and the level of the pixel that reached
    it; equal levels are served first-in first-out. Each unlabelled pixel takes
    the label of the first labelled neighbour that reaches it.
    """
    elev = _single_channel(elevation, "elevation") if isinstance(elevation, ProbMap) \
        else np.asarray(elevation, dtype=np.float64)
    lab = markers.labels
    if elev.shape != lab.shape:
        raise DataError(f"elevation {elev.shape} and markers {lab.shape} differ in size")
    if not lab.any():
        raise DataError("watershed needs at least one marker")

    h, w = lab.shape
    out = lab.ravel().astype(np.int32)
    z = elev.ravel().astype(np.float64).tolist()
    n = h * w
    counter = 0
    heap = []
    for i in np.flatnonzero(out).tolist():
        heap.append((z[i], counter, i))
        counter += 1
    heapq.heapify(heap)
    labels = out.tolist()
    pop, push = heapq.heappop, heapq.heappush
    while heap:
        level, _, i = pop(heap)
        li = labels[i]
        y, x = divmod(i, w)
        for j, ok in ((i - w, y > 0), (i - 1, x > 0), (i + 1, x < w - 1), (i + w, y < h - 1)):
            if ok and not labels[j]:
                labels[j] = li
                zj = z[j]
                push(heap, (zj if zj > level else level, counter, j))
                counter += 1
    return LabelMap(np.array(labels, np.int32).reshape(h, w))


# --------------------------------------------------------------------------
# connected components


def _structure(connectivity):
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndimage.generate_binary_structure(2, 2)
    raise DataError(f"connectivity must be 4 or 8, got {connectivity}")


def label_components(mask: BinaryMask, connectivity: int = 8):
    """Label foreground components; numbering follows raster order of first pixel."""
    return ndimage.label(mask.data, structure=_structure(connectivity))


def largest_component(mask: BinaryMask, connectivity: int = 8) -> BinaryMask:
    """Keep only the biggest component; ties go to the one seen first in raster order."""
    labels, count = label_components(mask, connectivity)
    if count == 0:
        return BinaryMask(np.zeros(mask.shape, np.uint8))
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    keep = int(np.argmax(sizes)) + 1
    return BinaryMask((labels == keep).astype(np.uint8))


# --------------------------------------------------------------------------
# full chain


@dataclass(frozen=True)
class ChainParams:
    crf: CrfParams = CrfParams()
    use_crf: bool = True
    use_watershed: bool = True
    fg_threshold: float = 0.8
    bg_threshold: float = 0.2
    bin_threshold: float = 0.5
    connectivity: int = 8
    exact: bool = False
    elevation: str = "inverse"

    def with_crf(self, **changes) -> ChainParams:
        return replace(self, crf=replace(self.crf, **changes))


def elevation_map(prob: ProbMap, kind: str = "inverse") -> np.ndarray:
    p = _single_channel(prob).astype(np.float64)
    if kind == "inverse":
        return 1.0 - p
    if kind == "gradient":
        return np.hypot(ndimage.sobel(p, axis=0), ndimage.sobel(p, axis=1))
    raise DataError(f"unknown elevation {kind!r}")


def postprocess_chain(image: RgbImage, prob: ProbMap, params: ChainParams = ChainParams(),
                      debug_dir=None) -> BinaryMask:
    """Refine a lesion probability map into a single-component lesion mask.

    Without lesion seeds the watershed is skipped and the refined map is
    binarized at ``bin_threshold`` instead.
    """
    dbg = Path(debug_dir) if debug_dir is not None else None
    if dbg is not None:
        dbg.mkdir(parents=True, exist_ok=True)

    refined = crf_refine(image, prob, params.crf, exact=params.exact) if params.use_crf else prob
    if dbg is not None:
        save_probmap(refined, dbg / "1_crf.pmap")

    mask = None
    if params.use_watershed:
        markers = derive_markers(refined, params.fg_threshold, params.bg_threshold)
        if dbg is not None:
            np.save(dbg / "2_markers.npy", markers.labels)
        if (markers.labels == 2).any():
            elevation = elevation_map(refined, params.elevation)
            flooded = watershed(elevation, markers)
            if dbg is not None:
                np.save(dbg / "3_watershed.npy", flooded.labels)
            mask = BinaryMask((flooded.labels == 2).astype(np.uint8))
    if mask is None:
        mask = binarize(refined, params.bin_threshold)
        if dbg is not None:
            save_mask_png(mask, dbg / "3_binarized.png")

    out = largest_component(mask, params.connectivity)
    if dbg is not None:
        save_mask_png(out, dbg / "4_largest_component.png")
    return out
