"""Synthetic multi-domain PPG nights for desk-scale experiments.

Each domain writes EDF signals plus label files and a manifest. Signals are
Gaussian-pulse trains whose rate, beat-to-beat jitter, and respiratory
amplitude modulation depend on the sleep stage drawn from a sticky Markov
chain; domains differ by a pulse-rate offset, an amplitude scale, and the
additive noise level.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from .records import (
    DatasetManifest,
    DatasetRole,
    PatientMeta,
    RecordEntry,
    save_manifest,
    write_edf,
    write_labels,
)

# Stage order everywhere: Wake, Light, Deep, REM.
_STAGE_TOKENS = ("W", "N2", "N3", "R")


def default_transition() -> list[list[float]]:
    """Sticky hypnogram dynamics: wake runs, light as the hub stage."""
    return [
        [0.82, 0.18, 0.00, 0.00],
        [0.04, 0.80, 0.10, 0.06],
        [0.01, 0.11, 0.88, 0.00],
        [0.05, 0.07, 0.00, 0.88],
    ]


@dataclass
class SynthDomainSpec:
    name: str = "domain"
    n_patients: int = 12
    epochs_per_night: int = 120
    fs: float = 64.0
    transition: list[list[float]] = field(default_factory=default_transition)
    rate_mean_bpm: tuple[float, float, float, float] = (84.0, 60.0, 46.0, 73.0)
    rate_sd_bpm: float = 1.0
    hf_jitter: tuple[float, float, float, float] = (0.08, 0.03, 0.01, 0.06)
    resp_depth: tuple[float, float, float, float] = (0.02, 0.25, 0.50, 0.10)
    # relative beat amplitude by stage: vasodilation deepens the pulse in
    # slow-wave sleep, the whole-night standardization keeps it a
    # within-night (offset-robust) cue
    pulse_amp: tuple[float, float, float, float] = (0.70, 1.0, 1.30, 0.80)
    resp_freq_hz: float = 0.25
    pulse_width_s: float = 0.09
    # domain shift knobs
    rate_offset_bpm: float = 0.0
    amplitude_scale: float = 1.0
    noise_sd: float = 0.08
    unscored_prob: float = 0.01

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=np.float64)
        if t.shape != (4, 4) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition must be 4x4 with rows summing to 1")
        lo = min(self.rate_mean_bpm) + self.rate_offset_bpm
        hi = max(self.rate_mean_bpm) + self.rate_offset_bpm
        if lo < 40.0 or hi > 120.0:
            raise ValueError("shifted stage rates must stay within [40, 120] bpm")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthDomainSpec":
        d = dict(d)
        for key in ("rate_mean_bpm", "hf_jitter", "resp_depth", "pulse_amp"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def default_domain_specs(
    n_domains: int = 3, n_patients: int = 12, epochs_per_night: int = 120
) -> list[SynthDomainSpec]:
    """Three calibrated domains with rate / amplitude / noise shifts."""
    shifts = [
        ("alpha", 0.0, 1.0, 0.04),
        ("bravo", 3.0, 1.3, 0.07),
        ("charlie", -3.0, 0.8, 0.10),
        ("delta", 2.0, 0.9, 0.05),
        ("echo", -2.0, 1.2, 0.08),
    ]
    specs = []
    for name, off, amp, noise in shifts[:n_domains]:
        specs.append(
            SynthDomainSpec(
                name=name,
                n_patients=n_patients,
                epochs_per_night=epochs_per_night,
                rate_offset_bpm=off,
                amplitude_scale=amp,
                noise_sd=noise,
            )
        )
    return specs


def _markov_stages(spec: SynthDomainSpec, rng: np.random.Generator) -> np.ndarray:
    t = np.asarray(spec.transition)
    stages = np.empty(spec.epochs_per_night, dtype=np.int64)
    state = 0  # nights start awake
    for e in range(spec.epochs_per_night):
        stages[e] = state
        state = int(rng.choice(4, p=t[state]))
    return stages


def _synth_night(spec: SynthDomainSpec, stages: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    duration = spec.epochs_per_night * 30.0
    n_samples = int(round(duration * spec.fs))
    x = np.zeros(n_samples)
    epoch_rate = np.clip(
        np.asarray(spec.rate_mean_bpm)[stages]
        + spec.rate_offset_bpm
        + rng.normal(0.0, spec.rate_sd_bpm, size=len(stages)),
        40.0,
        120.0,
    )
    width = spec.pulse_width_s
    half = int(np.ceil(4.0 * width * spec.fs))
    t = 0.25
    while t < duration:
        e = min(int(t / 30.0), len(stages) - 1)
        s = stages[e]
        amp = (
            spec.pulse_amp[s]
            * (1.0 + spec.resp_depth[s] * np.sin(2.0 * np.pi * spec.resp_freq_hz * t))
            * (1.0 + 0.02 * rng.standard_normal())
        )
        center = int(round(t * spec.fs))
        lo, hi = max(center - half, 0), min(center + half + 1, n_samples)
        if lo < hi:
            grid = (np.arange(lo, hi) / spec.fs) - t
            x[lo:hi] += amp * np.exp(-0.5 * (grid / width) ** 2)
        ibi = (60.0 / epoch_rate[e]) * (1.0 + spec.hf_jitter[s] * rng.standard_normal())
        t += float(np.clip(ibi, 0.25, 2.5))
    return spec.amplitude_scale * x + spec.noise_sd * rng.standard_normal(n_samples)


_ETHNICITIES = ("white", "black", "asian", "hispanic")


def _random_meta(rng: np.random.Generator) -> PatientMeta:
    return PatientMeta(
        age=round(float(rng.uniform(20.0, 85.0)), 1),
        sex=("female", "male")[int(rng.integers(2))],
        ahi=round(float(min(rng.exponential(15.0), 80.0)), 1),
        bmi=round(float(np.clip(rng.normal(28.0, 5.0), 17.0, 50.0)), 1),
        ethnicity=_ETHNICITIES[int(rng.integers(len(_ETHNICITIES)))],
    )


def generate_synthetic_domain(
    spec: SynthDomainSpec, seed: int, out_dir: str | Path
) -> tuple[DatasetManifest, Path]:
    """Write one domain to disk; same spec + seed gives identical bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(spec.n_patients):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        rid = f"{spec.name}-p{i:02d}"
        stages = _markov_stages(spec, rng)
        signal = _synth_night(spec, stages, rng)
        tokens = [_STAGE_TOKENS[s] for s in stages]
        for e in range(len(tokens)):
            if rng.random() < spec.unscored_prob:
                tokens[e] = "UNSCORED"
        meta = _random_meta(rng)
        signal_path = out_dir / f"{rid}.edf"
        label_path = out_dir / f"{rid}.labels.csv"
        write_edf(signal_path, [("Pleth", signal)], spec.fs, recording_id=rid)
        write_labels(label_path, tokens)
        entries.append(
            RecordEntry(
                record_id=rid,
                signal_path=signal_path,
                label_path=label_path,
                fs=spec.fs,
                channel="Pleth",
                meta=meta,
            )
        )
    manifest = DatasetManifest(name=spec.name, role=DatasetRole.SOURCE, records=entries)
    manifest_path = save_manifest(out_dir / "manifest.json", manifest)
    (out_dir / "domain_spec.json").write_text(
        json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    return manifest, manifest_path
