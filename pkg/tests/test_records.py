import numpy as np
import pytest

from ppgsleep import records
from ppgsleep.records import (
    ChannelNotFound,
    MalformedHeader,
    ManifestError,
    PatientMeta,
    TruncatedData,
    UnknownToken,
    load_manifest,
    read_edf,
    read_edf_header,
    read_labels,
    repair_gaps,
    write_edf,
)
from ppgsleep.staging import RawStage


def test_edf_constant_at_physical_max(tmp_path):
    # 10 records of 1 s at 128 Hz, every sample at the physical maximum
    pmax = 3.5
    sig = np.full(1280, pmax)
    path = write_edf(tmp_path / "c.edf", [("Pleth", sig)], 128.0, physical_range=(-1.0, pmax))
    rec = read_edf(path, "Pleth")
    assert len(rec.samples) == 1280
    assert rec.fs == 128.0
    np.testing.assert_array_equal(rec.samples, pmax)


def _roundtrip_once(tmp_path, rng, idx):
    fs = float(rng.choice([25, 64, 75, 128, 200, 256]))
    seconds = int(rng.integers(2, 8))
    samples = rng.normal(0.0, 2.0, size=int(fs) * seconds)
    lo = round(float(rng.uniform(-9.9, -0.5)), 2)
    hi = round(float(rng.uniform(0.5, 9.9)), 2)
    rid = f"rt{idx:03d}"
    p1 = write_edf(
        tmp_path / f"{rid}_a.edf",
        [("Pleth", samples)],
        fs,
        recording_id=rid,
        physical_range=(lo, hi),
    )
    hdr = read_edf_header(p1)
    rec = read_edf(p1, "Pleth")
    sig = hdr.signals[0]
    p2 = write_edf(
        tmp_path / f"{rid}_b.edf",
        [("Pleth", rec.samples)],
        rec.fs,
        recording_id=hdr.recording_id,
        patient_id=hdr.patient_id,
        start_date=hdr.start_date,
        start_time=hdr.start_time,
        physical_range=(sig.physical_min, sig.physical_max),
        digital_range=(sig.digital_min, sig.digital_max),
        record_duration=hdr.record_duration,
    )
    assert p1.read_bytes() == p2.read_bytes()


def test_edf_roundtrip_bytes(tmp_path):
    rng = np.random.default_rng(5)
    for i in range(5):
        _roundtrip_once(tmp_path, rng, i)


def test_edf_channel_not_found(tmp_path):
    path = write_edf(tmp_path / "eeg.edf", [("EEG", np.zeros(256))], 128.0)
    with pytest.raises(ChannelNotFound):
        read_edf(path, "Pleth")


def test_edf_malformed_header(tmp_path):
    path = write_edf(tmp_path / "bad.edf", [("Pleth", np.zeros(256))], 128.0)
    raw = bytearray(path.read_bytes())
    raw[252:256] = b"abcd"  # signal count must be ASCII-numeric
    path.write_bytes(bytes(raw))
    with pytest.raises(MalformedHeader):
        read_edf(path, "Pleth")


def test_edf_truncated(tmp_path):
    path = write_edf(tmp_path / "t.edf", [("Pleth", np.zeros(512))], 128.0)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 64])
    with pytest.raises(TruncatedData):
        read_edf(path, "Pleth")


def test_edf_two_channels(tmp_path):
    a = np.sin(np.arange(512) / 7.0)
    b = np.cos(np.arange(512) / 3.0)
    path = write_edf(tmp_path / "two.edf", [("Pleth", a), ("EEG", b)], 128.0)
    ra = read_edf(path, "Pleth")
    rb = read_edf(path, "EEG")
    assert np.abs(ra.samples - a).max() < 1e-3
    assert np.abs(rb.samples - b).max() < 1e-3


def test_read_labels(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("W\nN2\nR\n")
    hyp = read_labels(p)
    assert len(hyp) == 3
    assert hyp.valid_mask.all()
    raw_order = list(RawStage)
    assert [raw_order[c] for c in hyp.stages] == [RawStage.W, RawStage.N2, RawStage.REM]


def test_read_labels_unscored_mask(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("W\nUNSCORED\nR\n")
    hyp = read_labels(p)
    assert list(hyp.valid_mask) == [True, False, True]


def test_read_labels_unknown_token(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("N5\nW\n")
    with pytest.raises(UnknownToken) as err:
        read_labels(p)
    assert err.value.line == 1


def test_label_count_matches_lines(tmp_path):
    tokens = ["W", "N1", "N2", "N3", "S4", "R", "UNSCORED", "W"]
    p = records.write_labels(tmp_path / "l.csv", tokens)
    assert len(read_labels(p)) == len(tokens)


def _write_manifest(tmp_path, entries, name="demo"):
    import json

    doc = {"name": name, "role": "source", "records": entries}
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps(doc))
    return p


def test_manifest_valid(tmp_path):
    for rid in ("a", "b"):
        write_edf(tmp_path / f"{rid}.edf", [("Pleth", np.zeros(256))], 128.0)
        (tmp_path / f"{rid}.csv").write_text("W\n")
    p = _write_manifest(
        tmp_path,
        [
            {"record_id": rid, "signal_path": f"{rid}.edf", "label_path": f"{rid}.csv"}
            for rid in ("a", "b")
        ],
    )
    manifest = load_manifest(p)
    assert len(manifest) == 2


def test_manifest_collects_all_problems(tmp_path):
    write_edf(tmp_path / "a.edf", [("Pleth", np.zeros(256))], 128.0)
    (tmp_path / "a.csv").write_text("W\n")
    p = _write_manifest(
        tmp_path,
        [
            {"record_id": "a", "signal_path": "a.edf", "label_path": "a.csv"},
            {"record_id": "a", "signal_path": "gone.edf", "label_path": "gone.csv"},
        ],
    )
    with pytest.raises(ManifestError) as err:
        load_manifest(p)
    text = str(err.value)
    assert "duplicate id" in text
    assert "gone.edf" in text and "gone.csv" in text


def test_patient_meta_invariants():
    with pytest.raises(ValueError):
        PatientMeta(age=17.0)
    with pytest.raises(ValueError):
        PatientMeta(ahi=-1.0)
    with pytest.raises(ValueError):
        PatientMeta(bmi=0.0)
    meta = PatientMeta(age=40, sex="male", ahi=5.0, bmi=25.0)
    assert meta.sex == records.Sex.MALE


def test_repair_gaps_short_interpolates():
    fs = 10.0
    x = np.arange(100, dtype=float)
    x[40:45] = np.nan  # 0.5 s gap
    out, spans = repair_gaps(x, fs)
    assert spans == []
    np.testing.assert_allclose(out, np.arange(100, dtype=float), atol=1e-12)


def test_repair_gaps_long_zero_fills():
    fs = 10.0
    x = np.ones(200)
    x[50:120] = np.inf  # 7 s gap
    out, spans = repair_gaps(x, fs)
    assert spans == [(50, 120)]
    assert (out[50:120] == 0.0).all()
    assert np.isfinite(out).all()
