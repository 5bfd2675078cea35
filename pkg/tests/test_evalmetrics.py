import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hvts.dataio import SegmentTensor, SynthConfig, synth_dataset
from hvts.evalmetrics import ErrorMatrix, average_error, error_matrix, subject_summary, welch_psd
from hvts.softdtw import dtw


def smoother(x):
    """Stand-in model: three-tap moving average along time."""
    k = np.array([0.25, 0.5, 0.25])
    return np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), -1, x)


def dft_welch(x, fs, n, step):
    """Direct O(n^2) DFT oracle for one-sided Hann-windowed density Welch."""
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    k = np.arange(n // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
    segs = [x[s : s + n] for s in range(0, x.size - n + 1, step)]
    p = np.mean([np.abs(basis @ (w * s)) ** 2 for s in segs], axis=0) / (fs * np.sum(w**2))
    p[1:-1 if n % 2 == 0 else None] *= 2
    return k * fs / n, p


# ---------------------------------------------------------------- error matrix


def test_identity_model_gives_zero_matrix():
    segs = synth_dataset(SynthConfig(n_channels=3, n_samples=64), 4, 0)
    m = error_matrix(lambda x: x, segs)
    assert m.shape == (4, 3) and np.all(m.values == 0)


def test_single_entry_reduces_to_dtw():
    seg = synth_dataset(SynthConfig(n_channels=1, n_samples=64), 1, 0)[0]
    m = error_matrix(smoother, [seg])
    x = seg.samples[0].astype(float)
    assert m.values[0, 0] == pytest.approx(dtw(x, smoother(x[None])[0]).normalized_score, rel=1e-12)


def test_channelwise_recomputation_in_random_order():
    segs = synth_dataset(SynthConfig(n_channels=4, n_samples=64), 3, 1)
    m = error_matrix(smoother, segs)
    rng = np.random.default_rng(0)
    for c in rng.permutation(4):
        for r, seg in enumerate(segs):
            x = seg.samples[c].astype(float)
            assert m.values[r, c] == dtw(x, smoother(x[None])[0]).normalized_score


def test_error_matrix_uses_repetition_labels_and_round_trips():
    segs = synth_dataset(SynthConfig(n_channels=2, n_samples=32), 3, 0)
    m = error_matrix(smoother, segs, provenance="stub")
    assert m.row_labels == ["0", "1", "2"] and m.col_labels == ["ch0", "ch1"]
    back = ErrorMatrix.from_tsv(m.to_tsv())
    assert np.array_equal(back.values, m.values) and back.row_labels == m.row_labels


def test_error_matrix_rejects_bad_input():
    with pytest.raises(ValueError):
        ErrorMatrix(np.array([[-1.0]]))
    with pytest.raises(ValueError):
        error_matrix(smoother, [SegmentTensor(np.zeros((1, 4)), 1.0)], eps_mode="mean")


# ---------------------------------------------------------------- averaging


def test_average_of_one_and_two():
    a = ErrorMatrix(np.array([[1.0, 2.0]]))
    b = ErrorMatrix(np.array([[3.0, 6.0]]))
    assert np.array_equal(average_error([a]).values, a.values)
    assert np.array_equal(average_error([a, b]).values, [[2.0, 4.0]])
    assert np.array_equal(average_error([a, b], successful=[True, False]).values, a.values)
    with pytest.raises(ValueError):
        average_error([a], successful=[False])


def test_average_matches_brute_force_and_order():
    rng = np.random.default_rng(3)
    mats = [ErrorMatrix(rng.random((4, 3))) for _ in range(5)]
    brute = np.zeros((4, 3))
    for r in range(4):
        for c in range(3):
            brute[r, c] = sum(m.values[r, c] for m in mats) / 5
    np.testing.assert_allclose(average_error(mats).values, brute, rtol=1e-15)
    perm = [mats[i] for i in rng.permutation(5)]
    np.testing.assert_allclose(average_error(perm).values, brute, rtol=1e-15)


# ---------------------------------------------------------------- summary


def test_subject_summary_examples():
    assert subject_summary(np.full((3, 4), 2.5)) == (2.5, 0.0)
    assert subject_summary(np.zeros((2, 2))) == (0.0, 0.0)
    # per-channel means (0, 2): population std 1
    assert subject_summary(np.array([[0.0, 2.0], [0.0, 2.0]])) == (1.0, 1.0)
    assert subject_summary(np.array([[0.0, 2.0], [2.0, 0.0]]), "all-entries") == (1.0, 1.0)
    assert subject_summary(np.array([[0.0, 2.0], [2.0, 0.0]])) == (1.0, 0.0)
    with pytest.raises(ValueError):
        subject_summary(np.zeros((1, 1)), "median")


# ---------------------------------------------------------------- welch


def test_constant_series_power_at_dc():
    est = welch_psd(np.full(1000, 3.0), 250.0)
    assert est.peak_frequency == 0.0
    assert est.power[0] > 1e6 * est.power[5:].max()


def test_ten_hz_sine_peaks_at_ten():
    t = np.arange(1000) / 250.0
    est = welch_psd(np.sin(2 * np.pi * 10 * t), 250.0)
    assert est.frequencies[1] == 0.5
    assert est.peak_frequency == 10.0
    assert (est.window_len, est.overlap, est.window, est.scaling) == (500, 250, "hann", "density")


def test_matches_direct_dft_oracle():
    x = np.random.default_rng(4).standard_normal(1000)
    est = welch_psd(x, 250.0, 200, 100)
    f, p = dft_welch(x, 250.0, 200, 100)
    np.testing.assert_allclose(est.frequencies, f)
    np.testing.assert_allclose(est.power, p, rtol=1e-9)


def test_white_noise_is_flat():
    rng = np.random.default_rng(5)
    fs, sigma = 250.0, 2.0
    p = np.mean([welch_psd(sigma * rng.standard_normal(1000), fs).power for _ in range(100)], axis=0)
    interior = p[1:-1]
    # one-sided density of white noise is 2 sigma^2 / fs
    np.testing.assert_allclose(interior.mean(), 2 * sigma**2 / fs, rtol=0.02)
    assert np.abs(interior / (2 * sigma**2 / fs) - 1).max() < 0.35


def test_long_window_falls_back_to_single_periodogram():
    est = welch_psd(np.random.default_rng(0).standard_normal(300), 250.0)
    assert est.single_periodogram and est.window_len == 300
    with pytest.raises(ValueError):
        welch_psd(np.zeros(10), 1.0, 4, 4)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.integers(0, 7))
def test_power_ignores_whole_period_shifts(freq_bin, periods):
    fs, n = 250.0, 500
    f0 = freq_bin * fs / n
    t = np.arange(1000) / fs
    a = welch_psd(np.sin(2 * np.pi * f0 * t), fs).power
    b = welch_psd(np.sin(2 * np.pi * f0 * t + 2 * np.pi * periods), fs).power
    np.testing.assert_allclose(a, b, atol=1e-9 * a.max())


def test_psd_tsv_layout():
    est = welch_psd(np.zeros((2, 1000)), 250.0)
    lines = est.to_tsv().splitlines()
    assert lines[0] == "frequency_hz\tpower_0\tpower_1" and len(lines) == 252
