import json
from pathlib import Path

import numpy as np
import pytest

from ppgsleep import protocol, records, synth


@pytest.fixture(scope="session")
def tiny_domains(tmp_path_factory):
    """Two small synthetic domains with built caches, shared across tests."""
    root = tmp_path_factory.mktemp("tiny")
    specs = [
        synth.SynthDomainSpec(
            name=name,
            n_patients=3,
            epochs_per_night=30,
            rate_offset_bpm=off,
            amplitude_scale=amp,
            noise_sd=noise,
        )
        for name, off, amp, noise in [("tina", 0.0, 1.0, 0.04), ("tinb", 3.0, 1.2, 0.08)]
    ]
    caches = []
    manifests = []
    for spec in specs:
        _, mpath = synth.generate_synthetic_domain(spec, seed=11, out_dir=root / spec.name)
        manifests.append(mpath)
        manifest = records.load_manifest(mpath)
        caches.append(protocol.build_cache(manifest, root / f"cache_{spec.name}", kind="raw"))
    return {"root": root, "specs": specs, "manifests": manifests, "caches": caches}
