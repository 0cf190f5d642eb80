import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage

from segnl.phantom import PhantomSpec, _ellipsoid_mask, generate_subject
from segnl.preprocess import (
    MaskingError,
    NormalizationError,
    ShapeError,
    apply_mask,
    compute_brain_mask,
    nearest_rank_percentile,
    otsu_threshold,
    percentile_normalize,
    preprocess_subject,
)
from segnl.volume_io import Volume


def vol(a):
    return Volume(np.asarray(a, dtype=np.float32))


def test_constant_in_mask_becomes_one():
    v = vol(np.full((4, 4, 4), 3.25))
    out = percentile_normalize(v, np.ones((4, 4, 4), bool))
    assert np.all(out.data == 1.0)


def test_nearest_rank_divisor_95():
    values = np.arange(1, 101, dtype=np.float32).reshape(10, 10, 1)
    out = percentile_normalize(vol(values), np.ones(values.shape, bool))
    assert out.meta["normalization_divisor"] == 95.0
    assert out.data.max() == np.float32(100 / 95)


def test_nearest_rank_definition():
    # brute force: smallest v with count(x <= v) >= p% of n
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.normal(size=rng.integers(1, 40))
        p = rng.uniform(1, 100)
        ok = [v for v in np.sort(x) if np.count_nonzero(x <= v) >= p / 100 * x.size]
        assert nearest_rank_percentile(x, p) == ok[0]


@given(hnp.arrays(np.int32, (3, 4, 5), elements=st.integers(1, 10000)), st.integers(2, 50))
def test_scale_invariance(values, k):
    mask = np.ones(values.shape, bool)
    a = percentile_normalize(vol(values), mask)
    b = percentile_normalize(vol(values * k), mask)
    assert a.data.tobytes() == b.data.tobytes()


def test_normalization_errors():
    v = vol(np.zeros((3, 3, 3)))
    with pytest.raises(NormalizationError):
        percentile_normalize(v, np.ones((3, 3, 3), bool))
    with pytest.raises(NormalizationError):
        percentile_normalize(vol(np.ones((3, 3, 3))), np.zeros((3, 3, 3), bool))
    with pytest.raises(ShapeError):
        percentile_normalize(v, np.ones((3, 3, 2), bool))


def test_percentile_ignores_out_of_mask():
    data = np.zeros((10, 10, 1), np.float32)
    mask = np.zeros(data.shape, bool)
    mask[:5] = True
    data[mask] = 2.0
    out = percentile_normalize(vol(data), mask)
    assert out.meta["normalization_divisor"] == 2.0


def boundary_band(ellipsoid):
    return ndimage.binary_dilation(ellipsoid) & ~ndimage.binary_erosion(ellipsoid)


@pytest.mark.parametrize("index", [0, 1, 2])
def test_mask_matches_brain_ellipsoid(index):
    spec = PhantomSpec()
    subj = generate_subject(spec, index)
    mask = compute_brain_mask(subj.channel1)
    ell = _ellipsoid_mask(spec.dims, spec.grid_centre, spec.brain_semi_axes)
    disagree = mask ^ ell
    assert not (disagree & ~boundary_band(ell)).any()
    # ventricles are dark but must stay inside the mask
    assert mask[subj.truth.data > 0].all()


def test_mask_single_component_and_idempotent(small_spec):
    subj = generate_subject(small_spec, 5)
    mask = compute_brain_mask(subj.channel1)
    _, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    assert n == 1
    again = compute_brain_mask(apply_mask(subj.channel1, mask))
    np.testing.assert_array_equal(again, mask)


def test_mask_errors():
    with pytest.raises(MaskingError):
        compute_brain_mask(vol(np.zeros((5, 5, 5))))


def test_otsu_splits_bimodal(rng):
    x = np.concatenate([rng.normal(0, 0.05, 1000), rng.normal(1, 0.05, 1000)])
    t = otsu_threshold(x)
    # any cut in the gap is optimal; it must separate the two modes
    assert x[:1000].max() <= t < x[1000:].min()


def test_apply_mask_examples():
    v = vol(np.full((4, 5, 3), 2.0))
    np.testing.assert_array_equal(apply_mask(v, np.ones(v.dims, bool)).data, v.data)
    checker = (np.indices(v.dims).sum(axis=0) % 2) == 0
    out = apply_mask(v, checker)
    assert abs(out.data.sum() - v.data.sum() / 2) <= 2.0
    with pytest.raises(ShapeError):
        apply_mask(v, np.ones((4, 5, 2), bool))


def test_preprocess_subject(small_spec):
    subj = generate_subject(small_spec, 0)
    ch1, ch2, mask = preprocess_subject(subj)
    assert not ch1.data[~mask].any() and not ch2.data[~mask].any()
    for ch in (ch1, ch2):
        assert ch.meta["normalization_divisor"] > 0
        assert nearest_rank_percentile(ch.data[mask], 95) == pytest.approx(1.0, abs=1e-6)
