import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ppgsleep import dsp
from ppgsleep.dsp import (
    DegenerateSignal,
    EpochTensor,
    FilterSpec,
    InvalidSampling,
    LengthMismatch,
    NoBeatsFound,
    SignalTooShort,
    TooFewBeats,
    clip_and_standardize,
    design_cheby2,
    detect_peaks,
    epoch_slice,
    filtfilt,
    ipr_from_beats,
    resample_linear,
)
from ppgsleep.records import PpgRecord
from ppgsleep.staging import Hypnogram


def freq_response_db(sos, freqs, fs):
    """Independent magnitude oracle: evaluate each biquad on the unit circle."""
    z = np.exp(-2j * np.pi * np.asarray(freqs) / fs)
    h = np.ones_like(z, dtype=complex)
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * z + b2 * z * z) / (a0 + a1 * z + a2 * z * z)
    return 20.0 * np.log10(np.abs(h) + 1e-300)


@pytest.mark.parametrize("fs", [25.0, 75.0, 128.0, 256.0])
def test_filter_bounds(fs):
    sos = design_cheby2(FilterSpec(), fs)
    assert sos.shape == (4, 6)
    grid = np.linspace(0.0, fs / 2.0, 4096)
    mag = freq_response_db(sos, grid, fs)
    assert abs(mag[0]) < 1e-9 * 20  # DC gain 1 within 1e-9
    assert mag[grid >= 8.0].max() <= -40.0
    passband = mag[grid <= 4.0]
    assert passband.min() >= -1.0
    # passband is monotone non-increasing (tiny numerical slack)
    low = mag[grid <= 8.0]
    assert np.diff(low).max() <= 1e-6


def test_filter_dc_gain_exact():
    sos = design_cheby2(FilterSpec(), 128.0)
    h0 = 1.0
    for b0, b1, b2, a0, a1, a2 in sos:
        h0 *= (b0 + b1 + b2) / (a0 + a1 + a2)
    assert abs(h0 - 1.0) < 1e-12


def test_filter_invalid_sampling():
    with pytest.raises(InvalidSampling):
        design_cheby2(FilterSpec(), 16.0)


def test_filter_spec_validation():
    with pytest.raises(ValueError):
        FilterSpec(order=7)


def test_filtfilt_zero_phase_symmetric():
    fs = 128.0
    sos = design_cheby2(FilterSpec(), fs)
    n = 4097
    t = (np.arange(n) - n // 2) / fs
    pulse = np.exp(-0.5 * (t / 0.25) ** 2)
    out = filtfilt(sos, pulse)
    assert np.abs(out - out[::-1]).max() < 1e-9
    corr = np.correlate(out, pulse, mode="full")
    assert corr.argmax() == n - 1  # lag 0 exactly


def test_filtfilt_linearity():
    fs = 128.0
    sos = design_cheby2(FilterSpec(), fs)
    rng = np.random.default_rng(3)
    x = rng.normal(size=2048)
    y = rng.normal(size=2048)
    lhs = filtfilt(sos, 2.5 * x - 1.25 * y)
    rhs = 2.5 * filtfilt(sos, x) - 1.25 * filtfilt(sos, y)
    assert np.abs(lhs - rhs).max() < 1e-9


def _tone_amplitude(x, f, fs, lo, hi):
    # steady-state amplitude: project the central region (whole periods)
    # so edge transients stay out of the estimate
    seg = x[lo:hi]
    t = np.arange(lo, hi) / fs
    c = seg @ np.cos(2 * np.pi * f * t)
    s = seg @ np.sin(2 * np.pi * f * t)
    return 2.0 * np.hypot(c, s) / len(seg)


def test_filtfilt_passband_and_doubled_stopband():
    fs = 128.0
    sos = design_cheby2(FilterSpec(), fs)
    t = np.arange(int(30 * fs)) / fs
    lo, hi = 640, 640 + 2560  # 2560 samples = whole periods of 2 and 20 Hz
    x2 = np.sin(2 * np.pi * 2.0 * t)
    out2 = filtfilt(sos, x2)
    assert abs(_tone_amplitude(out2, 2.0, fs, lo, hi) - 1.0) < 0.01
    x20 = np.sin(2 * np.pi * 20.0 * t)
    out20 = filtfilt(sos, x20)
    assert _tone_amplitude(out20, 20.0, fs, lo, hi) <= 10 ** (-80.0 / 20.0)


def test_filtfilt_too_short():
    sos = design_cheby2(FilterSpec(), 128.0)
    with pytest.raises(SignalTooShort):
        filtfilt(sos, np.zeros(8))


def test_resample_constant():
    out = resample_linear(np.full(500, 2.5), 100.0)
    assert (out == 2.5).all()


def test_resample_epoch_count():
    assert len(resample_linear(np.zeros(7680), 256.0)) == 1024


def test_resample_sine_oracle():
    fs_in = 256.0
    t_in = np.arange(int(30 * fs_in)) / fs_in
    x = np.sin(2 * np.pi * 1.0 * t_in)
    out = resample_linear(x, fs_in)
    t_out = np.arange(len(out)) / dsp.TARGET_FS
    rmse = np.sqrt(np.mean((out - np.sin(2 * np.pi * t_out)) ** 2))
    assert rmse < 1e-3


def test_resample_upsamples_low_rate():
    out = resample_linear(np.zeros(25 * 30), 25.0)
    assert len(out) == 1024


@given(
    a=st.floats(-5, 5, allow_nan=False),
    b=st.floats(-5, 5, allow_nan=False),
    fs_in=st.sampled_from([50.0, 64.0, 100.0]),
)
@settings(max_examples=30)
def test_resample_exact_on_linear_signals(a, b, fs_in):
    n = 200
    x = a * np.arange(n) + b
    out = resample_linear(x, fs_in)
    pos = np.arange(len(out)) * fs_in / dsp.TARGET_FS
    expected = a * np.minimum(pos, n - 1) + b  # tail holds the last sample
    np.testing.assert_allclose(out, expected, atol=1e-9 * (abs(a) * n + abs(b) + 1))


def test_resample_empty():
    assert len(resample_linear(np.array([]), 100.0)) == 0


def test_clip_standardize_normal_noise():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(50_000)
    z = clip_and_standardize(x)
    assert abs(z.mean()) < 1e-9
    assert abs(z.std() - 1.0) < 1e-9
    sigma = x.std()
    clipped = np.clip(x, x.mean() - 3 * sigma, x.mean() + 3 * sigma)
    # clip bound is 3 sigma around the pre-clip mean; allow for the shift
    bound = (3.0 * sigma + abs(x.mean() - clipped.mean())) / clipped.std()
    assert np.abs(z).max() <= bound + 1e-9


def test_clip_standardize_artifact_clipped_first():
    x = np.concatenate([np.random.default_rng(0).standard_normal(10_000), [100.0]])
    mu, sd = x.mean(), x.std()
    z = clip_and_standardize(x)
    clipped = np.clip(x, mu - 3 * sd, mu + 3 * sd)
    expected = (clipped[-1] - clipped.mean()) / clipped.std()
    assert z[-1] == pytest.approx(expected, abs=1e-12)
    assert z[-1] == z.max()


def test_clip_standardize_constant_raises():
    with pytest.raises(DegenerateSignal):
        clip_and_standardize(np.full(100, 3.3))


@given(
    a=st.floats(0.01, 100.0, allow_nan=False),
    b=st.floats(-100.0, 100.0, allow_nan=False),
)
@settings(max_examples=25)
def test_clip_standardize_affine_invariant(a, b):
    rng = np.random.default_rng(11)
    x = rng.standard_normal(2000)
    z1 = clip_and_standardize(x)
    z2 = clip_and_standardize(a * x + b)
    assert np.abs(z1 - z2).max() < 1e-9


def _hyp(n, mask=None):
    return Hypnogram(
        np.zeros(n, dtype=np.int64),
        np.ones(n, dtype=bool) if mask is None else np.asarray(mask, bool),
        space="four",
    )


def test_epoch_slice_exact():
    t = epoch_slice(np.arange(3072.0), _hyp(3))
    assert t.data.shape == (3, 1024)
    assert t.valid_mask.all()


def test_epoch_slice_drops_tail():
    t = epoch_slice(np.arange(3100.0), _hyp(3))
    assert t.data.shape == (3, 1024)
    assert t.data[-1, -1] == 3071.0


def test_epoch_slice_mismatch():
    with pytest.raises(LengthMismatch):
        epoch_slice(np.zeros(5120), _hyp(2))


def test_epoch_slice_invalid_spans():
    t = epoch_slice(np.zeros(4096), _hyp(4), invalid_spans_s=[(31.0, 35.0)])
    assert list(t.valid_mask) == [True, False, True, True]


def _pulse_train(rate_bpm, fs=64.0, seconds=120.0, width=0.08):
    t = np.arange(int(seconds * fs)) / fs
    x = np.zeros_like(t)
    beats = []
    tb = 0.3
    i = 0
    while tb < seconds:
        x += np.exp(-0.5 * ((t - tb) / width) ** 2)
        beats.append(tb)
        rate = rate_bpm(tb) if callable(rate_bpm) else rate_bpm
        tb += 60.0 / rate
        i += 1
    return x, np.array(beats)


def test_detect_peaks_60bpm():
    fs = 64.0
    x, beats = _pulse_train(60.0, fs=fs)
    rec = PpgRecord("r", x, fs)
    found = detect_peaks(rec)
    # one beat per second within one sample of the generator truth
    assert abs(len(found) - len(beats)) <= 2
    inner = (found > 2.0) & (found < 118.0)
    matched = np.array([beats[np.argmin(np.abs(beats - f))] for f in found[inner]])
    assert np.abs(found[inner] - matched).max() <= 1.0 / fs + 1e-9


def test_detect_peaks_chirp_tracks_rate():
    fs = 64.0
    x, _ = _pulse_train(lambda tb: 60.0 + (100.0 - 60.0) * tb / 120.0, fs=fs)
    rec = PpgRecord("r", x, fs)
    ipr = ipr_from_beats(detect_peaks(rec), duration_s=120.0)
    t = np.arange(len(ipr.values)) / dsp.IPR_FS
    true_rate = 60.0 + 40.0 * t / 120.0
    sel = ipr.valid_mask & (t > 3) & (t < 117)
    assert np.abs(ipr.values[sel] - true_rate[sel]).max() < 2.0


def test_detect_peaks_flatline():
    with pytest.raises(NoBeatsFound):
        detect_peaks(PpgRecord("f", np.full(64 * 120, 0.7), 64.0))


def test_ipr_steady_60():
    ipr = ipr_from_beats(np.array([0.0, 1.0, 2.0, 3.0]))
    t = np.arange(len(ipr.values)) / dsp.IPR_FS
    sel = (t >= 0.5) & (t <= 2.5)
    np.testing.assert_allclose(ipr.values[sel], 60.0, atol=1e-12)


def test_ipr_120():
    ipr = ipr_from_beats(np.array([0.0, 0.5, 1.0]))
    np.testing.assert_allclose(ipr.values, 120.0, atol=1e-12)


def test_ipr_single_beat():
    with pytest.raises(TooFewBeats):
        ipr_from_beats(np.array([1.0]))


def test_ipr_masks_long_gap():
    beats = np.concatenate([np.arange(0, 10, 1.0), np.arange(20, 30, 1.0)])
    ipr = ipr_from_beats(beats, duration_s=30.0)
    t = np.arange(len(ipr.values)) / dsp.IPR_FS
    assert not ipr.valid_mask[(t > 10) & (t < 19)].any()
    assert ipr.valid_mask[(t > 1) & (t < 8)].all()


def test_cache_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensor = EpochTensor(rng.normal(size=(5, 1024)), np.array([1, 1, 0, 1, 1], bool))
    path = dsp.save_epoch_tensor(tmp_path / "x.spg2", tensor)
    assert path.read_bytes()[:4] == b"SPG2"
    back = dsp.load_epoch_tensor(path)
    assert back.data.shape == (5, 1024)
    np.testing.assert_array_equal(back.valid_mask, tensor.valid_mask)
    # float32 on disk
    np.testing.assert_allclose(back.data, tensor.data, atol=1e-6)


def test_ipr_cache_magic(tmp_path):
    tensor = EpochTensor(np.zeros((2, 60)), np.ones(2, bool), fs=dsp.IPR_FS)
    path = dsp.save_epoch_tensor(tmp_path / "x.spr2", tensor)
    assert path.read_bytes()[:4] == b"SPR2"
    back = dsp.load_epoch_tensor(path)
    assert back.samples_per_epoch == 60


def test_preprocess_record_end_to_end():
    fs = 64.0
    x, _ = _pulse_train(70.0, fs=fs, seconds=120.0)
    rng = np.random.default_rng(1)
    rec = PpgRecord("p", x + 0.05 * rng.standard_normal(len(x)), fs)
    hyp = _hyp(4)
    tensor, hyp_out = dsp.preprocess_record(rec, hyp)
    assert tensor.data.shape == (4, 1024)
    assert len(hyp_out) == 4
    zs = tensor.data.reshape(-1)
    assert abs(zs.mean()) < 1e-6
    assert abs(zs.std() - 1.0) < 1e-6
