import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats
from skimage.metrics import structural_similarity

from moment_fields.metrics import (CorrelationReport, UndefinedCorrelationError,
                                   _inversions_loop, _inversions_numpy,
                                   correlate_variance_error, error_map, kendall_tau,
                                   kendall_tau_brute, pearson, psnr, spearman, ssim)

COEFFS = (pearson, spearman, kendall_tau, kendall_tau_brute)

paired = st.integers(2, 60).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.integers(-5, 5).map(float)),
    arrays(np.float64, n, elements=st.integers(-5, 5).map(float))))


def defined(x, y):
    return np.ptp(x) > 0 and np.ptp(y) > 0


# --- error map -------------------------------------------------------------------

def test_error_map_examples():
    a = np.random.default_rng(0).random((4, 5, 3))
    assert np.all(error_map(a, a) == 0)
    np.testing.assert_allclose(error_map(np.ones((2, 2, 3)), np.zeros((2, 2, 3))), np.sqrt(3))
    np.testing.assert_allclose(error_map(np.array([[1.0, 4.0]]), np.array([[3.0, 1.0]])),
                               [[2.0, 3.0]])
    with pytest.raises(ValueError):
        error_map(np.zeros((2, 2)), np.zeros((2, 3)))


# --- correlations ---------------------------------------------------------------------

@pytest.mark.parametrize("fn", COEFFS)
def test_identity_and_reversal_are_exact(fn):
    x = np.random.default_rng(1).random(200)
    assert fn(x, x) == 1.0
    assert fn(x, -x) == -1.0


@pytest.mark.parametrize("fn", COEFFS)
def test_constant_input_raises(fn):
    with pytest.raises(UndefinedCorrelationError):
        fn([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        fn([1.0], [1.0])
    with pytest.raises(ValueError):
        fn([1.0, 2.0], [1.0, 2.0, 3.0])


def test_pearson_hand_computation():
    x = np.array([1, 2, 3, 4.0])
    y = x ** 2
    dx, dy = x - 2.5, y - 7.5
    expected = (dx @ dy) / np.sqrt((dx @ dx) * (dy @ dy))
    assert pearson(x, y) == pytest.approx(expected, abs=1e-15)
    assert pearson(x, y) == pytest.approx(0.9843740386976969, abs=1e-15)


def test_spearman_examples():
    x = np.random.default_rng(2).random(50)
    assert spearman(x, np.exp(3 * x)) == pytest.approx(1.0, abs=1e-15)
    assert spearman(x, -x ** 3) == pytest.approx(-1.0, abs=1e-15)
    # ranks of [1, 1, 2] are [1.5, 1.5, 3]
    assert spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(
        pearson([1.5, 1.5, 3.0], [1.0, 2.0, 3.0]), abs=1e-15)


def test_kendall_examples():
    assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)
    assert kendall_tau([1, 2, 3, 4], [2, 5, 7, 9]) == 1.0


@given(paired)
def test_coefficients_match_scipy(pair):
    x, y = pair
    if not defined(x, y):
        return
    assert pearson(x, y) == pytest.approx(stats.pearsonr(x, y)[0], abs=1e-12)
    assert spearman(x, y) == pytest.approx(stats.spearmanr(x, y)[0], abs=1e-12)
    assert kendall_tau(x, y) == pytest.approx(stats.kendalltau(x, y)[0], abs=1e-12)


@given(paired)
def test_kendall_fast_equals_brute(pair):
    x, y = pair
    if defined(x, y):
        assert kendall_tau(x, y) == kendall_tau_brute(x, y)


def test_kendall_fast_equals_brute_on_large_tied_data():
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.integers(0, 30, 1000).astype(float)
        y = x + rng.integers(0, 40, 1000)
        assert kendall_tau(x, y) == kendall_tau_brute(x, y)


@given(arrays(np.int64, st.integers(0, 300), elements=st.integers(-20, 20)))
def test_inversion_counters_agree(a):
    n = len(a)
    brute = sum(int(a[i] > a[j]) for i in range(n) for j in range(i + 1, n))
    assert _inversions_loop(a.astype(np.float64)) == brute
    assert _inversions_numpy(a.astype(np.float64)) == brute


@given(paired, st.floats(0.1, 10), st.floats(-10, 10))
def test_transform_invariance(pair, scale, shift):
    x, y = pair
    if not defined(x, y):
        return
    assert pearson(scale * x + shift, y) == pytest.approx(pearson(x, y), abs=1e-9)
    mono = np.arctan(x) * 7 + x ** 3
    assert spearman(mono, y) == pytest.approx(spearman(x, y), abs=1e-12)
    assert kendall_tau(mono, y) == kendall_tau(x, y)


@given(paired)
def test_coefficients_bounded(pair):
    x, y = pair
    if defined(x, y):
        for fn in COEFFS:
            assert -1.0 <= fn(x, y) <= 1.0


# --- image metrics -----------------------------------------------------------------

def test_psnr_examples():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a) == np.inf
    assert psnr(a, a + 0.5) == pytest.approx(6.0206, abs=1e-3)
    assert psnr(a + 0.3, a + 0.4) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(a, a[:-1])


def test_ssim_examples():
    rng = np.random.default_rng(4)
    a = rng.random((32, 30, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(1 - a, a) < 0
    assert ssim(np.full((16, 16), 0.5), np.full((16, 16), 0.5)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        ssim(a[:10], a[:10])


def test_ssim_matches_skimage():
    rng = np.random.default_rng(5)
    a = rng.random((40, 36, 3))
    b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


@given(st.integers(0, 10**6))
def test_image_metrics_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 16, 16, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-9)


# --- variance / error correlation ------------------------------------------------

def test_correlate_examples(rng):
    v = rng.random((40, 50))
    rep = correlate_variance_error(v, v)
    assert isinstance(rep, CorrelationReport) and rep.n == 2000
    assert rep.pearson == rep.spearman == rep.kendall == 1.0
    rep = correlate_variance_error(np.exp(5 * v), v)
    assert rep.spearman == 1.0 and rep.kendall == 1.0 and rep.pearson <= 1.0
    masked = correlate_variance_error(v, -v, mask=v > 0.5)
    assert masked.n == int((v > 0.5).sum()) and masked.kendall == -1.0
    with pytest.raises(UndefinedCorrelationError):
        correlate_variance_error(v, v, mask=np.zeros_like(v, bool))


def test_shuffled_error_is_uncorrelated(rng):
    v = rng.random(10_000)
    e = rng.permutation(v ** 2)
    rep = correlate_variance_error(v, e)
    # 3 sigma of Spearman under the null is 3 / sqrt(n - 1), about 0.03
    assert abs(rep.spearman) < 0.1 and abs(rep.kendall) < 0.1 and abs(rep.pearson) < 0.1
