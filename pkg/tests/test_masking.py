import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import aggregate_loops, otsu_exhaustive, propagation_direct
from subjsync.errors import ConfigError
from subjsync.masking import (
    aggregate_subject_maps,
    binarize,
    build_propagation_mask,
    dropout_mask,
    min_max_rescale,
    otsu_threshold,
    upsample_nearest,
)
from subjsync.rng import SplitMix64


def test_single_map_is_rescaled_copy():
    m = np.array([0.2, 0.6, 1.0, 0.4])
    assert np.allclose(aggregate_subject_maps([[m]]), (m - 0.2) / 0.8, rtol=0, atol=1e-15)


def test_symmetric_layers_give_constant_then_ones():
    raw = aggregate_subject_maps([[[0.0, 2.0]], [[2.0, 0.0]]], rescale=False)
    assert raw.tolist() == [1.0, 1.0]
    assert aggregate_subject_maps([[[0.0, 2.0]], [[2.0, 0.0]]]).tolist() == [1.0, 1.0]


def test_aggregate_vs_double_loop(rng):
    maps = rng.random((3, 2, 10))
    got = aggregate_subject_maps(maps, rescale=False)
    assert np.max(np.abs(got - aggregate_loops(maps.tolist()))) < 1e-12


def test_aggregate_empty_is_config_error():
    with pytest.raises(ConfigError):
        aggregate_subject_maps([])


def test_bimodal_map_selects_high_patches():
    m = np.r_[np.zeros(50), np.ones(50)]
    mask = binarize(m, "otsu")
    assert mask.tolist() == [False] * 50 + [True] * 50


def test_otsu_matches_exhaustive_search():
    gen = np.random.default_rng(0)
    for trial in range(1000):
        size = int(gen.integers(2, 40))
        if trial % 3 == 0:
            v = gen.random(size)
        elif trial % 3 == 1:
            v = np.r_[gen.normal(0.2, 0.05, size), gen.normal(0.7, 0.1, size)]
        else:
            v = gen.integers(0, 5, size) / 4.0  # many exact ties
        v = min_max_rescale(np.clip(v, 0, None))
        t = otsu_threshold(v)
        assert t == otsu_exhaustive(v.tolist()), trial
        if t is not None:
            assert np.array_equal(binarize(v, "otsu"), np.minimum(np.floor(v * 256), 255) >= t)


def test_otsu_tie_goes_to_lowest_threshold():
    assert otsu_threshold(np.array([0.0, 0.0, 1.0, 1.0])) == 1


@pytest.mark.parametrize("method", ["otsu", "niblack", "sauvola", "adaptive_mean"])
def test_constant_map_gives_all_ones(method):
    assert binarize(np.full(16, 0.3), method, (4, 4)).all()


@pytest.mark.parametrize("method", ["niblack", "sauvola", "adaptive_mean"])
def test_local_methods_pick_out_bright_block(method):
    grid = np.full((8, 8), 0.1)
    grid[2:5, 2:5] = 0.9
    grid += np.random.default_rng(1).random((8, 8)) * 0.01
    mask = binarize(min_max_rescale(grid.ravel()), method, (8, 8)).reshape(8, 8)
    assert mask[2:5, 2:5].any()
    assert mask[2:5, 2:5].mean() > mask[6:, 6:].mean()


def test_unknown_method():
    with pytest.raises(ConfigError):
        binarize(np.arange(4) / 3, "kmeans")


def test_propagation_single_image():
    assert build_propagation_mask(0, [[0, 1, 0]]).tolist() == [True] * 3


def test_propagation_two_images():
    g = build_propagation_mask(0, [[0, 0, 1, 1], [1, 0, 1, 0]])
    assert g.astype(int).tolist() == [1, 1, 1, 1, 1, 0, 1, 0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.bool_, (4, 7)), st.integers(0, 3))
def test_propagation_vs_reconstruction(masks, i):
    g = build_propagation_mask(i, masks)
    assert g.astype(int).tolist() == propagation_direct(i, masks.tolist())
    assert g[i * 7:(i + 1) * 7].all()


def test_dropout_rate_zero_is_identity():
    m = np.random.default_rng(3).random(50) > 0.5
    assert np.array_equal(dropout_mask(m, 0.0, SplitMix64(1)), m)


def test_dropout_binomial_bound():
    # Binomial(10000, 0.5): [4700, 5300] is +-6 standard deviations
    kept = dropout_mask(np.ones(10_000, bool), 0.5, SplitMix64(2024)).mean()
    assert 0.47 <= kept <= 0.53


def test_dropout_deterministic_and_only_clears():
    m = np.random.default_rng(4).random(300) > 0.3
    a = dropout_mask(m, 0.4, SplitMix64(99))
    b = dropout_mask(m, 0.4, SplitMix64(99))
    assert np.array_equal(a, b)
    assert not np.any(a & ~m)


def test_dropout_rate_one_rejected():
    with pytest.raises(ConfigError):
        dropout_mask(np.ones(3, bool), 1.0, SplitMix64(0))


def test_upsample_nearest():
    coarse = np.array([1.0, 2.0, 3.0, 4.0])
    fine = upsample_nearest(coarse, (2, 2), (4, 4)).reshape(4, 4)
    assert fine.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
