"""Signal conditioning for the staging pipeline.

The raw-PPG path: zero-phase order-8 Chebyshev II low-pass (8 Hz stopband
edge, 40 dB attenuation), linear-interpolation resampling to 2048/60 Hz
(34.1333... Hz, so a 30 s epoch is exactly 1024 samples), clip at three
whole-night standard deviations, then z-score. The pulse-rate path: band-pass
peak detection, interbeat intervals, instantaneous pulse rate on a 2 Hz grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sp_signal

from .records import PpgRecord
from .staging import Hypnogram, harmonize_hypnogram

# 2048/60 Hz: 30 s epochs hold exactly 1024 samples (power of two for the
# strided encoder). The printed "34.13 Hz" is this rate rounded.
TARGET_FS = 2048.0 / 60.0
SAMPLES_PER_EPOCH = 1024
EPOCH_SECONDS = 30.0

IPR_FS = 2.0
IPR_SAMPLES_PER_EPOCH = 60


class InvalidSampling(ValueError):
    pass


class SignalTooShort(ValueError):
    pass


class DegenerateSignal(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NoBeatsFound(ValueError):
    pass


class TooFewBeats(ValueError):
    pass


@dataclass
class FilterSpec:
    order: int = 8
    stopband_edge_hz: float = 8.0
    stopband_atten_db: float = 40.0
    zero_phase: bool = True

    def __post_init__(self):
        if self.order < 2 or self.order % 2:
            raise ValueError("filter order must be even and >= 2")


@dataclass
class EpochTensor:
    """Standardized per-epoch model input: [n_epochs, samples_per_epoch]."""

    data: np.ndarray
    valid_mask: np.ndarray
    fs: float = TARGET_FS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.data.ndim != 2 or len(self.data) != len(self.valid_mask):
            raise ValueError("data must be [n_epochs, spe] with one mask entry per epoch")

    @property
    def n_epochs(self) -> int:
        return len(self.data)

    @property
    def samples_per_epoch(self) -> int:
        return self.data.shape[1]


@dataclass
class IprSeries:
    """Instantaneous pulse rate (bpm) on a 2 Hz grid; long beat gaps masked."""

    values: np.ndarray
    valid_mask: np.ndarray
    fs: float = IPR_FS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)


# ---------------------------------------------------------------------------
# Filtering

# Equiripple stopband peaks sit exactly at the design attenuation; a small
# margin keeps the realized response strictly inside the -40 dB bound.
_DESIGN_MARGIN_DB = 0.05


def design_cheby2(spec: FilterSpec, fs: float) -> np.ndarray:
    """Low-pass Chebyshev II as second-order sections, DC gain exactly 1.

    Raises InvalidSampling unless fs > 2 * stopband edge.
    """
    if fs <= 2.0 * spec.stopband_edge_hz:
        raise InvalidSampling(
            f"fs={fs} Hz cannot host a {spec.stopband_edge_hz} Hz stopband edge"
        )
    sos = sp_signal.cheby2(
        spec.order,
        spec.stopband_atten_db + _DESIGN_MARGIN_DB,
        spec.stopband_edge_hz,
        btype="lowpass",
        fs=fs,
        output="sos",
    )
    dc = 1.0
    for b0, b1, b2, a0, a1, a2 in sos:
        dc *= (b0 + b1 + b2) / (a0 + a1 + a2)
    sos[0, :3] /= dc
    return sos


def settling_length(sos: np.ndarray, tol: float = 1e-9, cap: int = 20000) -> int:
    """Samples until the impulse response tail drops below tol of its mass."""
    impulse = np.zeros(cap)
    impulse[0] = 1.0
    h = np.abs(sp_signal.sosfilt(sos, impulse))
    total = h.sum()
    tail = np.cumsum(h[::-1])[::-1]
    idx = np.flatnonzero(tail < tol * total)
    return int(idx[0]) if len(idx) else cap


def filtfilt(sos: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Forward-backward (zero-phase) application; attenuation doubles in dB.

    Uses odd-reflection padding of one settling length; raises
    SignalTooShort when the signal cannot support it.
    """
    x = np.asarray(x, dtype=np.float64)
    pad = settling_length(sos)
    if len(x) <= pad:
        raise SignalTooShort(f"{len(x)} samples, need > {pad} for this filter")
    return sp_signal.sosfiltfilt(sos, x, padtype="odd", padlen=pad)


# ---------------------------------------------------------------------------
# Resampling and standardization

def resample_linear(x: np.ndarray, fs_in: float, fs_out: float = TARGET_FS) -> np.ndarray:
    """Linear-interpolation resampling; output length floor(duration * fs_out).

    Output sample k sits at time k / fs_out; positions past the last input
    sample hold its value. Empty input gives empty output.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return x.copy()
    n_out = int(np.floor(len(x) * fs_out / fs_in + 1e-9))
    pos = np.arange(n_out) * (fs_in / fs_out)
    return np.interp(pos, np.arange(len(x)), x)


def clip_and_standardize(x: np.ndarray) -> np.ndarray:
    """Clip at mean +/- 3 SD of the whole signal, then z-score the result.

    Statistics are whole-night, computed once before and once after the
    clip. Raises DegenerateSignal for (effectively) constant input.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise DegenerateSignal("empty signal")
    mu = x.mean()
    sd = x.std()
    clipped = np.clip(x, mu - 3.0 * sd, mu + 3.0 * sd)
    mu2 = clipped.mean()
    sd2 = clipped.std()
    if sd2 == 0.0:
        raise DegenerateSignal("constant signal after clipping")
    return (clipped - mu2) / sd2


def epoch_slice(
    x: np.ndarray,
    hypnogram: Hypnogram,
    invalid_spans_s: list[tuple[float, float]] = (),
    samples_per_epoch: int = SAMPLES_PER_EPOCH,
) -> EpochTensor:
    """Cut a standardized night into 30 s rows aligned with the hypnogram.

    A trailing partial epoch is dropped; the mask is the hypnogram mask AND
    a clean-signal mask derived from the zero-filled gap spans. Raises
    LengthMismatch when signal and labels disagree by more than 2 epochs.
    """
    n_sig = len(x) // samples_per_epoch
    n_hyp = len(hypnogram)
    if abs(n_sig - n_hyp) > 2:
        raise LengthMismatch(f"signal holds {n_sig} epochs, hypnogram {n_hyp}")
    n = min(n_sig, n_hyp)
    data = np.asarray(x[: n * samples_per_epoch], dtype=np.float64).reshape(n, samples_per_epoch)
    mask = hypnogram.valid_mask[:n].copy()
    epoch_s = samples_per_epoch / TARGET_FS if samples_per_epoch == SAMPLES_PER_EPOCH else EPOCH_SECONDS
    for start_s, stop_s in invalid_spans_s:
        lo = int(np.floor(start_s / epoch_s))
        hi = int(np.ceil(stop_s / epoch_s))
        mask[max(lo, 0) : min(hi, n)] = False
    return EpochTensor(data, mask)


def preprocess_record(
    record: PpgRecord, hypnogram: Hypnogram, spec: FilterSpec | None = None
) -> tuple[EpochTensor, Hypnogram]:
    """Full raw-PPG conditioning chain for one night.

    Returns the epoch tensor and the harmonized hypnogram trimmed to the
    same length, with the combined validity mask on both.
    """
    spec = spec or FilterSpec()
    sos = design_cheby2(spec, record.fs)
    filtered = filtfilt(sos, record.samples)
    resampled = resample_linear(filtered, record.fs, TARGET_FS)
    z = clip_and_standardize(resampled)
    hyp4 = harmonize_hypnogram(hypnogram)
    spans_s = [(a / record.fs, b / record.fs) for a, b in record.invalid_spans]
    tensor = epoch_slice(z, hyp4, spans_s)
    n = tensor.n_epochs
    hyp_out = Hypnogram(hyp4.stages[:n], tensor.valid_mask.copy(), space="four")
    return tensor, hyp_out


# ---------------------------------------------------------------------------
# Peak detection and pulse rate

_PULSE_BAND = (0.5, 8.0)
_REFRACTORY_S = 0.2
_THRESHOLD_WINDOW_S = 10.0
_THRESHOLD_FRACTION = 0.6
_MAX_BEAT_GAP_S = 3.0


def detect_peaks(record: PpgRecord) -> np.ndarray:
    """Beat times (seconds) via band-passed local maxima over an adaptive
    threshold: 0.6 x the rolling 90th percentile in 10 s windows, with a
    0.2 s refractory spacing."""
    fs = record.fs
    lo, hi = _PULSE_BAND
    if fs <= 2.0 * hi:
        raise InvalidSampling(f"fs={fs} Hz too low for the {hi} Hz pulse band")
    sos = sp_signal.butter(2, [lo, hi], btype="bandpass", fs=fs, output="sos")
    xf = sp_signal.sosfiltfilt(sos, record.samples)
    if xf.std() < 1e-10 * max(1.0, float(np.abs(record.samples).max(initial=0.0))):
        raise NoBeatsFound(f"record {record.record_id}: no pulsatile content")

    win = max(int(round(_THRESHOLD_WINDOW_S * fs)), 2)
    hop = max(win // 2, 1)
    starts = np.arange(0, max(len(xf) - win, 0) + 1, hop)
    if len(starts) == 0:
        starts = np.array([0])
    centers = starts + min(win, len(xf)) / 2.0
    p90 = np.array([np.percentile(xf[s : s + win], 90) for s in starts])
    threshold = _THRESHOLD_FRACTION * np.interp(np.arange(len(xf)), centers, p90)

    idx, _ = sp_signal.find_peaks(
        xf, height=threshold, distance=max(int(round(_REFRACTORY_S * fs)), 1)
    )
    if len(idx) == 0:
        raise NoBeatsFound(f"record {record.record_id}: no peaks above threshold")
    return idx / fs


def ipr_from_beats(beat_times: np.ndarray, duration_s: float | None = None) -> IprSeries:
    """Instantaneous pulse rate 60/IBI at interval midpoints, linearly
    interpolated onto the 2 Hz grid.

    Grid points inside beat gaps longer than 3 s, or further than 3 s
    outside the observed beats, are masked; so are rates outside
    [20, 300] bpm.
    """
    beat_times = np.asarray(beat_times, dtype=np.float64)
    if len(beat_times) < 2:
        raise TooFewBeats(f"need >= 2 beats, got {len(beat_times)}")
    ibi = np.diff(beat_times)
    mids = beat_times[:-1] + ibi / 2.0
    rates = 60.0 / ibi
    if duration_s is None:
        duration_s = float(beat_times[-1])
    n = int(np.floor(duration_s * IPR_FS + 1e-9))
    t = np.arange(n) / IPR_FS
    values = np.interp(t, mids, rates)

    mask = np.ones(n, dtype=bool)
    mask &= t >= mids[0] - _MAX_BEAT_GAP_S
    mask &= t <= mids[-1] + _MAX_BEAT_GAP_S
    gap_idx = np.flatnonzero(np.diff(mids) > _MAX_BEAT_GAP_S)
    for g in gap_idx:
        mask &= ~((t > mids[g]) & (t < mids[g + 1]))
    mask &= (values >= 20.0) & (values <= 300.0)
    return IprSeries(values, mask)


def ipr_slice(ipr: IprSeries, hypnogram: Hypnogram) -> EpochTensor:
    """Cut an IPR series into 60-sample epoch rows, z-scored per night.

    An epoch is valid when at least half its IPR samples are valid and the
    hypnogram agrees. Masked samples are filled by the interpolated values
    already present, so rows are always finite.
    """
    spe = IPR_SAMPLES_PER_EPOCH
    hyp4 = harmonize_hypnogram(hypnogram)
    n_sig = len(ipr.values) // spe
    n_hyp = len(hyp4)
    if abs(n_sig - n_hyp) > 2:
        raise LengthMismatch(f"IPR holds {n_sig} epochs, hypnogram {n_hyp}")
    n = min(n_sig, n_hyp)
    vals = ipr.values[: n * spe].astype(np.float64)
    sd = vals.std()
    if sd == 0.0:
        raise DegenerateSignal("constant pulse rate series")
    vals = (vals - vals.mean()) / sd
    data = vals.reshape(n, spe)
    frac_valid = ipr.valid_mask[: n * spe].reshape(n, spe).mean(axis=1)
    mask = hyp4.valid_mask[:n] & (frac_valid >= 0.5)
    return EpochTensor(data, mask, fs=IPR_FS)


# ---------------------------------------------------------------------------
# On-disk cache (flat binary)

_MAGIC_BY_SPE = {SAMPLES_PER_EPOCH: b"SPG2", IPR_SAMPLES_PER_EPOCH: b"SPR2"}
_SPE_BY_MAGIC = {v: k for k, v in _MAGIC_BY_SPE.items()}
_CACHE_VERSION = 1


def save_epoch_tensor(path: str | Path, tensor: EpochTensor) -> Path:
    """Write the cache blob: magic, version u32, n_epochs u32, then
    rows as little-endian float32, then one mask byte per epoch."""
    magic = _MAGIC_BY_SPE.get(tensor.samples_per_epoch)
    if magic is None:
        raise ValueError(f"unsupported samples_per_epoch {tensor.samples_per_epoch}")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", _CACHE_VERSION, tensor.n_epochs))
        f.write(tensor.data.astype("<f4").tobytes())
        f.write(tensor.valid_mask.astype(np.uint8).tobytes())
    return path


def load_epoch_tensor(path: str | Path) -> EpochTensor:
    raw = Path(path).read_bytes()
    magic, spe = raw[:4], _SPE_BY_MAGIC.get(raw[:4])
    if spe is None:
        raise ValueError(f"{path}: bad magic {magic!r}")
    version, n = struct.unpack("<II", raw[4:12])
    if version != _CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    need = 12 + 4 * n * spe + n
    if len(raw) < need:
        raise ValueError(f"{path}: truncated cache file")
    data = np.frombuffer(raw[12 : 12 + 4 * n * spe], dtype="<f4").reshape(n, spe)
    mask = np.frombuffer(raw[12 + 4 * n * spe : need], dtype=np.uint8).astype(bool)
    fs = TARGET_FS if spe == SAMPLES_PER_EPOCH else IPR_FS
    return EpochTensor(data.astype(np.float64), mask, fs=fs)
