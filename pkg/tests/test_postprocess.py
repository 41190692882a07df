import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import blob_case
from lesionkit.imgcore import BinaryMask, DataError, ProbMap, RgbImage, load_mask_png
from lesionkit.metrics import jaccard
from lesionkit.postprocess import (ChainParams, CrfParams, LabelMap, binarize, crf_refine,
                                   derive_markers, largest_component, postprocess_chain,
                                   watershed, window_pairs, working_scale)
from oracles import (bottleneck_from, components_union_find, dense_mean_field, flood_oracle,
                     largest_component_oracle)


def P(rows):
    return ProbMap(np.array(rows, dtype=float))


def test_binarize():
    assert binarize(P([[1.0, 1.0]])).data.tolist() == [[1, 1]]
    assert binarize(P([[0.5]])).data.tolist() == [[1]]
    assert binarize(P([[0.4, 0.6]])).data.tolist() == [[0, 1]]
    with pytest.raises(DataError):
        binarize(ProbMap(np.zeros((2, 2, 2))))


# ---------------------------------------------------------------- CRF


def test_crf_zero_iterations_returns_input(rng):
    img = RgbImage(rng.integers(0, 256, (5, 5, 3), dtype=np.uint8))
    prob = ProbMap(rng.random((5, 5)))
    assert crf_refine(img, prob, CrfParams(iterations=0)) is prob


def test_crf_no_pairwise_is_fixed_point(rng):
    img = RgbImage(rng.integers(0, 256, (9, 7, 3), dtype=np.uint8))
    p = rng.uniform(0.01, 0.99, (9, 7))
    for exact in (False, True):
        out = crf_refine(img, ProbMap(p), CrfParams(w_spatial=0, w_bilateral=0), exact=exact)
        assert np.abs(out.data[:, :, 0] - p).max() <= 1e-12


def test_crf_fills_hole_and_matches_dense_oracle():
    p = np.full((8, 8), 0.9)
    p[4, 3] = 0.1
    img = np.full((8, 8, 3), 128, np.uint8)
    params = CrfParams(w_spatial=3, sigma_spatial=3, iterations=5, max_window_pairs=None)
    out = crf_refine(RgbImage(img), ProbMap(p), params).data[:, :, 0]
    assert out[4, 3] > 0.5
    oracle = dense_mean_field(img, p, 5, 3, 3, params.w_bilateral, params.sigma_bilateral_xy,
                              params.sigma_bilateral_rgb)
    assert np.abs(out - oracle).max() < 1e-9


@pytest.mark.parametrize("seed", range(4))
def test_crf_matches_dense_oracle_random(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 11, 2)
    img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    p = rng.random((h, w))
    params = CrfParams(iterations=3, w_spatial=rng.uniform(0, 4), sigma_spatial=rng.uniform(0.5, 3),
                       w_bilateral=rng.uniform(0, 6), sigma_bilateral_xy=rng.uniform(1, 6),
                       sigma_bilateral_rgb=rng.uniform(5, 40),
                       kernel_truncation_radius_sigmas=20, max_window_pairs=None)
    oracle = dense_mean_field(img, p, 3, params.w_spatial, params.sigma_spatial,
                              params.w_bilateral, params.sigma_bilateral_xy,
                              params.sigma_bilateral_rgb)
    for exact in (False, True):
        out = crf_refine(RgbImage(img), ProbMap(p), params, exact=exact).data[:, :, 0]
        assert np.abs(out - oracle).max() < 1e-9


def test_crf_truncation_radius():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, (6, 6, 3), dtype=np.uint8)
    p = rng.random((6, 6))
    narrow = CrfParams(iterations=2, sigma_spatial=1, sigma_bilateral_xy=1,
                       kernel_truncation_radius_sigmas=1, max_window_pairs=None)
    wide = CrfParams(iterations=2, sigma_spatial=1, sigma_bilateral_xy=1,
                     kernel_truncation_radius_sigmas=6, max_window_pairs=None)
    full = crf_refine(RgbImage(img), ProbMap(p), narrow, exact=True).data
    assert np.abs(crf_refine(RgbImage(img), ProbMap(p), narrow).data - full).max() > 1e-3
    assert np.abs(crf_refine(RgbImage(img), ProbMap(p), wide).data - full).max() < 1e-9


def test_crf_output_is_probability(rng):
    img = RgbImage(rng.integers(0, 256, (12, 12, 3), dtype=np.uint8))
    out = crf_refine(img, ProbMap(rng.random((12, 12))), CrfParams(w_spatial=50, w_bilateral=80))
    assert out.channels == 1
    assert (out.data >= 0).all() and (out.data <= 1).all()


def test_crf_dim_mismatch(rng):
    img = RgbImage(rng.integers(0, 256, (4, 4, 3), dtype=np.uint8))
    with pytest.raises(DataError):
        crf_refine(img, ProbMap(np.zeros((4, 5))))


def test_crf_params_validation():
    with pytest.raises(DataError):
        CrfParams(sigma_spatial=0)
    with pytest.raises(DataError):
        CrfParams(iterations=-1)


def test_working_scale_budget():
    params = CrfParams()
    assert working_scale(16, 16, params) == 1.0
    f = working_scale(512, 512, params)
    assert 0 < f < 1
    side = round(512 * f)
    assert window_pairs(side, side, params.radius(f)) <= params.max_window_pairs
    assert working_scale(512, 512, CrfParams(max_window_pairs=None)) == 1.0


def test_window_pairs_counts_full_grid():
    assert window_pairs(3, 4, 10) == 12 * 11


# ---------------------------------------------------------------- watershed


def test_watershed_single_marker(rng):
    m = np.zeros((5, 6), int)
    m[2, 3] = 7
    out = watershed(rng.random((5, 6)), LabelMap(m))
    assert (out.labels == 7).all()


def test_watershed_flat_strip():
    m = LabelMap(np.array([[1, 0, 0, 2]]))
    assert watershed(np.zeros((1, 4)), m).labels.tolist() == [[1, 1, 2, 2]]


def test_watershed_partitions_at_ridge():
    elev = np.array([[0.1, 0.2, 0.9, 0.3, 0.1]] * 3)
    m = np.zeros((3, 5), int)
    m[1, 0] = 1
    m[1, 4] = 2
    out = watershed(elev, LabelMap(m)).labels
    assert (out[:, :2] == 1).all() and (out[:, 3:] == 2).all()


def test_watershed_requires_markers():
    with pytest.raises(DataError, match="marker"):
        watershed(np.zeros((2, 2)), LabelMap(np.zeros((2, 2), int)))


def _random_ws_case(rng, distinct=True):
    h, w = rng.integers(1, 9, 2)
    elev = rng.random((h, w)) if distinct else rng.integers(0, 3, (h, w)) / 2
    m = np.zeros((h, w), int)
    k = rng.integers(1, min(4, h * w) + 1)
    idx = rng.choice(h * w, k, replace=False)
    m.ravel()[idx] = rng.integers(1, 4, k)
    return elev, m


@pytest.mark.parametrize("seed", range(40))
def test_watershed_matches_flood_oracle(seed):
    rng = np.random.default_rng(seed)
    elev, m = _random_ws_case(rng, distinct=seed % 2 == 0)
    out = watershed(elev, LabelMap(m)).labels
    assert np.array_equal(out, flood_oracle(elev, m))
    assert (out > 0).all()
    assert set(np.unique(out)) <= set(np.unique(m[m > 0]))
    assert (out[m > 0] == m[m > 0]).all()


@pytest.mark.parametrize("seed", range(15))
def test_watershed_labels_follow_minimax_paths(seed):
    rng = np.random.default_rng(1000 + seed)
    elev, m = _random_ws_case(rng)
    out = watershed(elev, LabelMap(m)).labels
    costs = {lab: bottleneck_from(elev, list(zip(*np.nonzero(m == lab))))
             for lab in np.unique(m[m > 0])}
    best = np.minimum.reduce(list(costs.values()))
    for y in range(m.shape[0]):
        for x in range(m.shape[1]):
            assert costs[out[y, x]][y, x] == best[y, x]


def test_derive_markers():
    assert (derive_markers(P([[0.9, 0.95]])).labels == 2).all()
    assert not derive_markers(P([[0.5, 0.5]])).labels.any()
    assert derive_markers(P([[0.1, 0.5, 0.9]])).labels.tolist() == [[1, 0, 2]]
    with pytest.raises(DataError):
        derive_markers(P([[0.5]]), fg_threshold=0.2, bg_threshold=0.8)


# ---------------------------------------------------------------- components


def test_largest_single_blob():
    m = np.zeros((5, 5), np.uint8)
    m[1:3, 1:4] = 1
    assert np.array_equal(largest_component(BinaryMask(m)).data, m)


def test_largest_keeps_bigger_blob():
    m = np.zeros((4, 8), np.uint8)
    m[0, 0:3] = 1  # size 3
    m[2:4, 5:8] = 1
    m[2, 7] = 0  # size 5
    out = largest_component(BinaryMask(m)).data
    assert out.sum() == 5 and out[0].sum() == 0


def test_largest_tie_goes_to_first_pixel():
    m = np.zeros((3, 6), np.uint8)
    m[0, 0:2] = 1
    m[2, 4:6] = 1
    out = largest_component(BinaryMask(m)).data
    assert out[0, 0] == 1 and out[2].sum() == 0


def test_largest_connectivity_matters():
    m = np.array([[1, 0, 0], [0, 1, 1], [0, 0, 0]], np.uint8)
    assert largest_component(BinaryMask(m), 8).data.sum() == 3
    assert largest_component(BinaryMask(m), 4).data.sum() == 2


def test_largest_empty():
    assert not largest_component(BinaryMask(np.zeros((3, 3), np.uint8))).data.any()


@settings(max_examples=150, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)),
              elements=st.integers(0, 1)), st.sampled_from([4, 8]))
def test_largest_matches_union_find(m, conn):
    out = largest_component(BinaryMask(m), conn).data
    assert np.array_equal(out, largest_component_oracle(m, conn))
    assert np.array_equal(largest_component(BinaryMask(out), conn).data, out)
    assert (out <= m).all()
    assert len(components_union_find(out, conn)) == (1 if m.any() else 0)


# ---------------------------------------------------------------- chain


def _clean_blob(n=32):
    yy, xx = np.mgrid[0:n, 0:n]
    gt = ((yy - 15) ** 2 + (xx - 14) ** 2 <= 64).astype(np.uint8)
    img = np.where(gt[..., None] == 1, (110, 60, 50), (210, 180, 160)).astype(np.uint8)
    return img, gt


def test_chain_clean_blob_exact():
    img, gt = _clean_blob()
    p = np.where(gt == 1, 0.95, 0.05)
    out = postprocess_chain(RgbImage(img), ProbMap(p))
    assert np.array_equal(out.data, gt)


def test_chain_all_background():
    img, _ = _clean_blob()
    out = postprocess_chain(RgbImage(img), ProbMap(np.full((32, 32), 0.02)))
    assert not out.data.any()


def test_chain_removes_distant_speck():
    img, gt = _clean_blob()
    p = np.where(gt == 1, 0.95, 0.05)
    p[28:30, 28:30] = 0.99
    out = postprocess_chain(RgbImage(img), ProbMap(p), ChainParams(use_crf=False))
    assert np.array_equal(out.data, gt)
    out = postprocess_chain(RgbImage(img), ProbMap(p))
    assert out.data[28:30, 28:30].sum() == 0


def test_chain_without_watershed_uses_binarize():
    img, gt = _clean_blob()
    p = np.where(gt == 1, 0.7, 0.3)  # no lesion seeds at 0.8
    out = postprocess_chain(RgbImage(img), ProbMap(p), ChainParams(use_crf=False))
    assert np.array_equal(out.data, gt)


def test_chain_improves_noisy_case():
    img, p, gt = blob_case(3)
    before = jaccard(binarize(ProbMap(p)), BinaryMask(gt))
    after = jaccard(postprocess_chain(RgbImage(img), ProbMap(p)), BinaryMask(gt))
    assert after > before


def test_chain_debug_dump(tmp_path):
    img, gt = _clean_blob()
    p = np.where(gt == 1, 0.95, 0.05)
    postprocess_chain(RgbImage(img), ProbMap(p), debug_dir=tmp_path)
    names = sorted(f.name for f in tmp_path.iterdir())
    assert names == ["1_crf.pmap", "2_markers.npy", "3_watershed.npy", "4_largest_component.png"]
    assert np.array_equal(load_mask_png(tmp_path / "4_largest_component.png").data, gt)
