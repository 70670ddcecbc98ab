"""PPG record ingestion: a minimal EDF reader/writer pair, plain-text
signal and label files, and dataset manifests.

Only continuous EDF is supported: 256-byte fixed header, 256 header bytes
per signal, samples stored as little-endian two's-complement 16-bit
integers scaled affinely between the digital and physical ranges.
Stage labels live in a separate one-token-per-epoch CSV.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .staging import Hypnogram, RawStage


class MalformedHeader(ValueError):
    """An EDF header field failed to parse."""


class ChannelNotFound(KeyError):
    pass


class TruncatedData(ValueError):
    """File is shorter than the header promises."""


class UnknownToken(ValueError):
    def __init__(self, token: str, line: int):
        super().__init__(f"unknown stage token {token!r} at line {line}")
        self.token = token
        self.line = line


class ManifestError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("manifest validation failed:\n  " + "\n  ".join(problems))
        self.problems = problems


class Sex(enum.Enum):
    FEMALE = "female"
    MALE = "male"
    UNKNOWN = "unknown"


@dataclass
class PatientMeta:
    age: float | None = None
    sex: Sex = Sex.UNKNOWN
    ahi: float | None = None
    bmi: float | None = None
    ethnicity: str | None = None
    diagnosis: str | None = None

    def __post_init__(self):
        if isinstance(self.sex, str):
            self.sex = Sex(self.sex)
        if self.age is not None and self.age < 18:
            raise ValueError(f"age {self.age} below the adult cutoff of 18")
        if self.ahi is not None and self.ahi < 0:
            raise ValueError("AHI must be non-negative")
        if self.bmi is not None and self.bmi <= 0:
            raise ValueError("BMI must be positive")

    def to_dict(self) -> dict:
        return {
            "age": self.age,
            "sex": self.sex.value,
            "ahi": self.ahi,
            "bmi": self.bmi,
            "ethnicity": self.ethnicity,
            "diagnosis": self.diagnosis,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "PatientMeta":
        if not d:
            return cls()
        return cls(
            age=d.get("age"),
            sex=Sex(d.get("sex", "unknown")),
            ahi=d.get("ahi"),
            bmi=d.get("bmi"),
            ethnicity=d.get("ethnicity"),
            diagnosis=d.get("diagnosis"),
        )


@dataclass
class PpgRecord:
    """One night of PPG: physical-unit samples at a fixed rate.

    ``invalid_spans`` are [start, stop) sample ranges that gap repair
    zero-filled; epochs overlapping them are masked downstream.
    """

    record_id: str
    samples: np.ndarray
    fs: float
    meta: PatientMeta = field(default_factory=PatientMeta)
    invalid_spans: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.fs <= 0:
            raise ValueError("sampling rate must be positive")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.fs

    def validate_for_pipeline(self):
        """Ingestion invariants: at least one minute, all samples finite."""
        if self.duration_s < 60.0:
            raise ValueError(
                f"record {self.record_id}: {self.duration_s:.1f} s, need >= 60 s"
            )
        if not np.isfinite(self.samples).all():
            raise ValueError(f"record {self.record_id}: non-finite samples survived repair")


# ---------------------------------------------------------------------------
# EDF

_FIXED_HEADER = 256
_PER_SIGNAL_HEADER = 256


@dataclass
class EdfSignalInfo:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int
    dimension: str = ""


@dataclass
class EdfHeader:
    patient_id: str
    recording_id: str
    start_date: str
    start_time: str
    n_records: int
    record_duration: float
    signals: list[EdfSignalInfo]

    def fs(self, signal_index: int) -> float:
        return self.signals[signal_index].samples_per_record / self.record_duration


def _ascii(raw: bytes, what: str) -> str:
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError as e:
        raise MalformedHeader(f"{what}: not ASCII") from e


def _int_field(raw: bytes, what: str) -> int:
    text = _ascii(raw, what).strip()
    try:
        return int(text)
    except ValueError as e:
        raise MalformedHeader(f"{what}: expected integer, got {text!r}") from e


def _float_field(raw: bytes, what: str) -> float:
    text = _ascii(raw, what).strip()
    try:
        return float(text)
    except ValueError as e:
        raise MalformedHeader(f"{what}: expected number, got {text!r}") from e


def read_edf_header(path: str | Path) -> EdfHeader:
    data = Path(path).read_bytes()
    if len(data) < _FIXED_HEADER:
        raise TruncatedData(f"{path}: {len(data)} bytes, fixed header needs 256")
    _int_field(data[0:8], "version")
    patient_id = _ascii(data[8:88], "patient id").rstrip()
    recording_id = _ascii(data[88:168], "recording id").rstrip()
    start_date = _ascii(data[168:176], "start date").rstrip()
    start_time = _ascii(data[176:184], "start time").rstrip()
    header_bytes = _int_field(data[184:192], "header bytes")
    n_records = _int_field(data[236:244], "record count")
    record_duration = _float_field(data[244:252], "record duration")
    ns = _int_field(data[252:256], "signal count")
    if ns <= 0:
        raise MalformedHeader(f"signal count {ns} must be positive")
    if header_bytes != _FIXED_HEADER + ns * _PER_SIGNAL_HEADER:
        raise MalformedHeader(
            f"header byte count {header_bytes} inconsistent with {ns} signals"
        )
    if len(data) < header_bytes:
        raise TruncatedData(f"{path}: signal headers truncated")

    def fields(offset: int, width: int) -> list[bytes]:
        base = _FIXED_HEADER + offset * ns
        return [data[base + i * width : base + (i + 1) * width] for i in range(ns)]

    labels = [_ascii(raw, "label").rstrip() for raw in fields(0, 16)]
    dims = [_ascii(raw, "dimension").rstrip() for raw in fields(96, 8)]
    pmin = [_float_field(raw, "physical min") for raw in fields(104, 8)]
    pmax = [_float_field(raw, "physical max") for raw in fields(112, 8)]
    dmin = [_int_field(raw, "digital min") for raw in fields(120, 8)]
    dmax = [_int_field(raw, "digital max") for raw in fields(128, 8)]
    spr = [_int_field(raw, "samples per record") for raw in fields(216, 8)]

    signals = [
        EdfSignalInfo(labels[i], pmin[i], pmax[i], dmin[i], dmax[i], spr[i], dims[i])
        for i in range(ns)
    ]
    return EdfHeader(
        patient_id, recording_id, start_date, start_time, n_records, record_duration, signals
    )


def read_edf(path: str | Path, channel_name: str) -> PpgRecord:
    """Read one channel of an EDF file as physical-unit floats.

    fs is samples_per_record / record_duration. Raises ChannelNotFound if
    no signal label matches, TruncatedData if the data region is short.
    """
    path = Path(path)
    header = read_edf_header(path)
    ns = len(header.signals)
    labels = [s.label for s in header.signals]
    if channel_name not in labels:
        raise ChannelNotFound(f"{path}: channel {channel_name!r} not in {labels}")
    idx = labels.index(channel_name)

    data = path.read_bytes()
    body = data[_FIXED_HEADER + ns * _PER_SIGNAL_HEADER :]
    record_words = sum(s.samples_per_record for s in header.signals)
    expected = header.n_records * record_words * 2
    if len(body) < expected:
        raise TruncatedData(
            f"{path}: data region {len(body)} bytes, header promises {expected}"
        )
    raw = np.frombuffer(body[:expected], dtype="<i2").reshape(header.n_records, record_words)
    start = sum(s.samples_per_record for s in header.signals[:idx])
    sig = header.signals[idx]
    digital = raw[:, start : start + sig.samples_per_record].reshape(-1)

    scale = (sig.physical_max - sig.physical_min) / (sig.digital_max - sig.digital_min)
    offset = sig.physical_max - scale * sig.digital_max
    samples = digital.astype(np.float64) * scale + offset
    fs = sig.samples_per_record / header.record_duration
    return PpgRecord(record_id=header.recording_id or path.stem, samples=samples, fs=fs)


def _fmt_field(value, width: int) -> bytes:
    text = format(value)
    if isinstance(value, float):
        text = _fmt_number(value, width)
    if len(text) > width:
        raise ValueError(f"field {text!r} exceeds {width} bytes")
    return text.ljust(width).encode("ascii")


def _fmt_number(value: float, width: int) -> str:
    """Shortest decimal form that round-trips through float(), <= width chars."""
    if value == int(value) and abs(value) < 10 ** (width - 1):
        return str(int(value))
    text = repr(value)
    if len(text) <= width:
        return text
    for prec in range(width - 2, 0, -1):
        text = f"{value:.{prec}g}"
        if len(text) <= width:
            return text
    raise ValueError(f"cannot format {value} in {width} chars")


def write_edf(
    path: str | Path,
    channels: list[tuple[str, np.ndarray]] | None = None,
    fs: float = 0.0,
    *,
    record: PpgRecord | None = None,
    channel_name: str = "Pleth",
    patient_id: str = "X X X X",
    recording_id: str = "",
    start_date: str = "01.01.00",
    start_time: str = "00.00.00",
    physical_range: tuple[float, float] | None = None,
    digital_range: tuple[int, int] = (-32768, 32767),
    record_duration: float = 1.0,
) -> Path:
    """Write a continuous EDF file with canonical header formatting.

    Either pass ``channels`` as [(label, samples), ...] sharing one fs, or a
    single ``record``. fs * record_duration must be integral; a trailing
    partial data record is dropped. With the default auto physical range the
    written file reproduces inputs to 16-bit quantization; pass the original
    ``physical_range`` / ``digital_range`` to re-serialize a parsed file
    byte-identically.
    """
    path = Path(path)
    if record is not None:
        channels = [(channel_name, record.samples)]
        fs = record.fs
        if not recording_id:
            recording_id = record.record_id
    if not channels:
        raise ValueError("nothing to write")

    spr_f = fs * record_duration
    spr = int(round(spr_f))
    if abs(spr_f - spr) > 1e-9 or spr <= 0:
        raise ValueError(f"fs * record_duration = {spr_f} is not a positive integer")
    n_records = min(len(s) for _, s in channels) // spr
    if n_records == 0:
        raise ValueError("less than one data record of samples")

    ns = len(channels)
    dmin, dmax = digital_range
    infos = []
    digitized = []
    for label, samples in channels:
        samples = np.asarray(samples, dtype=np.float64)[: n_records * spr]
        if physical_range is None:
            lo, hi = float(samples.min()), float(samples.max())
            if hi <= lo:
                hi = lo + 1.0
            # widen slightly and keep endpoints to a short decimal form
            span = hi - lo
            lo = float(_fmt_number(lo - 0.01 * span, 8))
            hi = float(_fmt_number(hi + 0.01 * span, 8))
            if hi <= lo:
                hi = lo + 1.0
        else:
            lo, hi = physical_range
        scale = (hi - lo) / (dmax - dmin)
        offset = hi - scale * dmax
        dig = np.clip(np.round((samples - offset) / scale), dmin, dmax).astype("<i2")
        infos.append(EdfSignalInfo(label, lo, hi, dmin, dmax, spr))
        digitized.append(dig.reshape(n_records, spr))

    header = bytearray()
    header += _fmt_field(0, 8)
    header += _fmt_field(patient_id, 80)
    header += _fmt_field(recording_id, 80)
    header += _fmt_field(start_date, 8)
    header += _fmt_field(start_time, 8)
    header += _fmt_field(_FIXED_HEADER + ns * _PER_SIGNAL_HEADER, 8)
    header += _fmt_field("", 44)
    header += _fmt_field(n_records, 8)
    header += _fmt_number(record_duration, 8).ljust(8).encode("ascii")
    header += _fmt_field(ns, 4)
    for width, get in [
        (16, lambda s: s.label),
        (80, lambda s: ""),
        (8, lambda s: s.dimension),
        (8, lambda s: _fmt_number(s.physical_min, 8)),
        (8, lambda s: _fmt_number(s.physical_max, 8)),
        (8, lambda s: s.digital_min),
        (8, lambda s: s.digital_max),
        (80, lambda s: ""),
        (8, lambda s: s.samples_per_record),
        (32, lambda s: ""),
    ]:
        for info in infos:
            header += _fmt_field(get(info), width)

    body = bytearray()
    for r in range(n_records):
        for dig in digitized:
            body += dig[r].tobytes()
    path.write_bytes(bytes(header) + bytes(body))
    return path


# ---------------------------------------------------------------------------
# Labels

_TOKEN_TO_RAW = {
    "W": RawStage.W,
    "N1": RawStage.N1,
    "N2": RawStage.N2,
    "N3": RawStage.N3,
    "S1": RawStage.S1,
    "S2": RawStage.S2,
    "S3": RawStage.S3,
    "S4": RawStage.S4,
    "R": RawStage.REM,
    "UNSCORED": RawStage.UNSCORED,
}

_RAW_INDEX = {stage: i for i, stage in enumerate(RawStage)}


def read_labels(path: str | Path) -> Hypnogram:
    """Parse a one-token-per-30-s-epoch label file into a raw-space hypnogram.

    UNSCORED epochs are kept but masked invalid.
    """
    stages = []
    mask = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            token = line.strip()
            if not token:
                continue
            raw = _TOKEN_TO_RAW.get(token)
            if raw is None:
                raise UnknownToken(token, lineno)
            stages.append(_RAW_INDEX[raw])
            mask.append(raw is not RawStage.UNSCORED)
    return Hypnogram(np.array(stages, dtype=np.int64), np.array(mask, dtype=bool), space="raw")


def write_labels(path: str | Path, tokens: list[str]) -> Path:
    path = Path(path)
    path.write_text("\n".join(tokens) + "\n")
    return path


# ---------------------------------------------------------------------------
# Gap repair

_MAX_INTERP_GAP_S = 5.0


def repair_gaps(samples: np.ndarray, fs: float) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Fix non-finite runs: interpolate runs <= 5 s, zero-fill longer ones.

    Returns the repaired signal and the [start, stop) spans that were
    zero-filled (these invalidate any epoch they touch).
    """
    samples = np.asarray(samples, dtype=np.float64)
    bad = ~np.isfinite(samples)
    if not bad.any():
        return samples, []
    out = samples.copy()
    spans: list[tuple[int, int]] = []
    max_gap = int(round(_MAX_INTERP_GAP_S * fs))
    idx = np.flatnonzero(np.diff(np.concatenate(([False], bad, [False])).astype(np.int8)))
    good = np.flatnonzero(~bad)
    for start, stop in zip(idx[0::2], idx[1::2]):
        if stop - start <= max_gap and len(good):
            xp = good
            out[start:stop] = np.interp(np.arange(start, stop), xp, samples[xp])
        else:
            out[start:stop] = 0.0
            spans.append((int(start), int(stop)))
    return out, spans


# ---------------------------------------------------------------------------
# Manifests

class DatasetRole(enum.Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass
class RecordEntry:
    record_id: str
    signal_path: Path
    label_path: Path
    fs: float | None = None
    channel: str = "Pleth"
    meta: PatientMeta = field(default_factory=PatientMeta)


@dataclass
class DatasetManifest:
    name: str
    role: DatasetRole
    records: list[RecordEntry]

    def __len__(self) -> int:
        return len(self.records)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a dataset manifest (JSON).

    All problems (dangling paths, duplicate ids, bad metadata) are collected
    into one ManifestError instead of failing on the first.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    base = path.parent
    problems: list[str] = []
    entries: list[RecordEntry] = []
    seen: set[str] = set()
    for i, rec in enumerate(doc.get("records", [])):
        rid = rec.get("record_id") or f"record{i}"
        if rid in seen:
            problems.append(f"duplicate id {rid!r}")
        seen.add(rid)
        signal_path = base / rec["signal_path"]
        label_path = base / rec["label_path"]
        for p in (signal_path, label_path):
            if not p.exists():
                problems.append(f"{rid}: missing file {p}")
        try:
            meta = PatientMeta.from_dict(rec.get("meta"))
        except (ValueError, KeyError) as e:
            problems.append(f"{rid}: bad metadata ({e})")
            meta = PatientMeta()
        entries.append(
            RecordEntry(
                record_id=rid,
                signal_path=signal_path,
                label_path=label_path,
                fs=rec.get("fs"),
                channel=rec.get("channel", "Pleth"),
                meta=meta,
            )
        )
    if not entries:
        problems.append("manifest has no records")
    if problems:
        raise ManifestError(problems)
    return DatasetManifest(
        name=doc.get("name", path.stem),
        role=DatasetRole(doc.get("role", "source")),
        records=entries,
    )


def save_manifest(path: str | Path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    base = path.parent
    doc = {
        "name": manifest.name,
        "role": manifest.role.value,
        "records": [
            {
                "record_id": e.record_id,
                "signal_path": str(
                    e.signal_path.relative_to(base)
                    if e.signal_path.is_relative_to(base)
                    else e.signal_path
                ),
                "label_path": str(
                    e.label_path.relative_to(base)
                    if e.label_path.is_relative_to(base)
                    else e.label_path
                ),
                "fs": e.fs,
                "channel": e.channel,
                "meta": e.meta.to_dict(),
            }
            for e in manifest.records
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_record(entry: RecordEntry) -> PpgRecord:
    """Load one manifest entry: EDF by suffix, else one-float-per-line text.

    Gap repair runs here so no NaN/Inf survives ingestion; the pipeline
    length invariant (>= 60 s) is enforced.
    """
    if entry.signal_path.suffix.lower() == ".edf":
        rec = read_edf(entry.signal_path, entry.channel)
        rec.record_id = entry.record_id
    else:
        raw = np.loadtxt(entry.signal_path, dtype=np.float64, ndmin=1)
        if entry.fs is None:
            raise ManifestError([f"{entry.record_id}: text signals need explicit fs"])
        rec = PpgRecord(record_id=entry.record_id, samples=raw, fs=float(entry.fs))
    rec.meta = entry.meta
    rec.samples, rec.invalid_spans = repair_gaps(rec.samples, rec.fs)
    rec.validate_for_pipeline()
    return rec
