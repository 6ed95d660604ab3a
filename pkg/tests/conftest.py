import numpy as np
import pytest

from eegimage.data import (
    CLASS_NAMES,
    DatasetManifest,
    ManifestEntry,
    subset_tag,
)


def make_manifest(n_patients=6, segments_per_patient=3, seed=0,
                  vote_range=(3, 15)) -> DatasetManifest:
    """Small random manifest for structural tests (no signal files)."""
    rng = np.random.default_rng(seed)
    entries = []
    idx = 0
    for p in range(n_patients):
        for _ in range(segments_per_patient):
            n_votes = int(rng.integers(*vote_range))
            votes = np.bincount(
                rng.integers(0, len(CLASS_NAMES), size=n_votes),
                minlength=len(CLASS_NAMES),
            )
            votes = tuple(int(v) for v in votes)
            entries.append(
                ManifestEntry(
                    segment_id=f"s{idx:05d}",
                    recording_id=f"r{p:03d}",
                    patient_id=f"p{p:03d}",
                    votes=votes,
                    subset=subset_tag(votes),
                    path=f"signals/s{idx:05d}.eeg",
                )
            )
            idx += 1
    return DatasetManifest(entries)


@pytest.fixture
def small_manifest():
    return make_manifest()
