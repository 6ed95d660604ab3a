"""Segments, montage, labels, manifests and fold splitting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_manifest
from eegimage.data import (
    CLASS_NAMES,
    HIGH_QUALITY_MIN_VOTES,
    ClassId,
    DatasetManifest,
    EegSegment,
    ManifestEntry,
    MissingElectrodeError,
    apply_montage,
    consensus,
    load_manifest,
    read_signal,
    save_manifest,
    soft_label,
    split_folds,
    standard_double_banana,
    subset_tag,
    summarize,
    write_signal,
)

# --- classes ---


def test_class_order_is_fixed():
    assert [c.name for c in ClassId] == ["SEIZURE", "LPD", "GPD", "LRDA", "GRDA", "OTHER"]
    assert [int(c) for c in ClassId] == [0, 1, 2, 3, 4, 5]
    assert CLASS_NAMES == ("seizure", "lpd", "gpd", "lrda", "grda", "other")


# --- montage ---


def test_double_banana_structure():
    m = standard_double_banana()
    assert len(m.pairs) == 16
    assert m.pairs[0] == ("Fp1", "F7")
    assert all(len(chain) == 4 for chain in m.chains)
    assert len(m.chains) == 4
    assert m.electrodes == frozenset(
        "Fp1 Fp2 F3 F4 F7 F8 C3 C4 T3 T4 T5 T6 P3 P4 O1 O2".split()
    )


def test_montage_rejects_bad_labels():
    from eegimage.data import Montage

    pairs = list(standard_double_banana().pairs)
    pairs[3] = ("Fp1", "XX9")
    with pytest.raises(ValueError):
        Montage(pairs=tuple(pairs))
    with pytest.raises(ValueError):
        Montage(pairs=tuple(pairs[:8]))


def montage_inputs(seed=0):
    m = standard_double_banana()
    names = sorted(m.electrodes) + ["Cz", "Fz", "Pz"]
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(len(names), 100))
    return m, names, x


def test_apply_montage_zero_for_identical_signals():
    m, names, x = montage_inputs()
    x[:] = x[0]  # every electrode identical
    out = apply_montage(x, names, m)
    assert np.all(out == 0.0)


def test_apply_montage_constant_anchor():
    m, names, x = montage_inputs()
    idx = {n: i for i, n in enumerate(names)}
    x[:] = 0.0
    x[idx["Fp1"]] = 1.0
    x[idx["F7"]] = -1.0
    out = apply_montage(x, names, m)
    assert np.all(out[0] == 2.0)


def test_apply_montage_matches_subtraction_oracle():
    m, names, x = montage_inputs(seed=1)
    out = apply_montage(x, names, m)
    idx = {n: i for i, n in enumerate(names)}
    for i, (a, c) in enumerate(m.pairs):
        assert np.array_equal(out[i], x[idx[a]] - x[idx[c]])


def test_apply_montage_missing_electrode():
    m, names, x = montage_inputs()
    names = ["Oz" if n == "O2" else n for n in names]
    with pytest.raises(MissingElectrodeError):
        apply_montage(x, names, m)


def test_apply_montage_is_linear():
    m, names, x = montage_inputs(seed=2)
    _, _, y = montage_inputs(seed=3)
    a, b = 2.5, -1.25
    combined = apply_montage(a * x + b * y, names, m)
    split = a * apply_montage(x, names, m) + b * apply_montage(y, names, m)
    assert np.max(np.abs(combined - split)) < 1e-9


# --- segments ---


def seg_kwargs(**kw):
    base = dict(
        samples=np.zeros((16, 1000), dtype=np.float32),
        fs=100.0,
        segment_id="s0",
        recording_id="r0",
        patient_id="p0",
        t_total_s=10.0,
        t_center_s=2.0,
    )
    base.update(kw)
    return base


def test_segment_validation():
    EegSegment(**seg_kwargs())  # valid
    with pytest.raises(ValueError):
        EegSegment(**seg_kwargs(t_total_s=9.0))
    with pytest.raises(ValueError):
        EegSegment(**seg_kwargs(t_center_s=3.0))
    bad = np.zeros((16, 1000), dtype=np.float32)
    bad[3, 7] = np.inf
    with pytest.raises(ValueError):
        EegSegment(**seg_kwargs(samples=bad))


# --- labels ---


def test_soft_label_anchors():
    assert np.array_equal(soft_label(np.array([3, 0, 0, 0, 0, 0])),
                          [1, 0, 0, 0, 0, 0])
    assert np.array_equal(soft_label(np.array([10, 10, 0, 0, 0, 0])),
                          [0.5, 0.5, 0, 0, 0, 0])
    got = soft_label(np.array([1, 2, 3, 4, 5, 5]))
    assert np.allclose(got, [0.05, 0.10, 0.15, 0.20, 0.25, 0.25], atol=1e-15)


def test_soft_label_errors():
    with pytest.raises(ValueError):
        soft_label(np.zeros(6))
    with pytest.raises(ValueError):
        soft_label(np.array([1, -1, 1, 0, 0, 0]))
    with pytest.raises(ValueError):
        soft_label(np.array([1, 2, 3]))


@given(st.lists(st.integers(0, 28), min_size=6, max_size=6).filter(lambda v: sum(v) >= 1))
@settings(max_examples=300, deadline=None)
def test_soft_label_always_normalized(votes):
    p = soft_label(np.array(votes))
    assert abs(p.sum() - 1.0) < 1e-12
    assert p.min() >= 0.0


def test_consensus_anchors():
    assert consensus(np.array([5, 3, 0, 0, 0, 0])) == ClassId.SEIZURE
    assert consensus(np.array([0, 0, 0, 0, 0, 7])) == ClassId.OTHER
    assert consensus(np.array([4, 4, 0, 0, 0, 0])) == ClassId.SEIZURE


def test_consensus_zero_votes():
    with pytest.raises(ValueError):
        consensus(np.zeros(6, dtype=int))


@given(st.permutations(list(range(6))), st.integers(0, 10_000))
@settings(max_examples=150, deadline=None)
def test_consensus_equivariant_under_permutation(perm, seed):
    rng = np.random.default_rng(seed)
    votes = rng.permutation(np.array([1, 3, 7, 12, 20, 28]))  # distinct counts
    base = int(consensus(votes))
    shuffled = np.empty(6, dtype=votes.dtype)
    for new_pos, old_pos in enumerate(perm):
        shuffled[new_pos] = votes[old_pos]
    got = int(consensus(shuffled))
    assert perm[got] == base


# --- manifests ---


def test_manifest_rejects_duplicate_segment_ids():
    e = ManifestEntry("s0", "r0", "p0", (1, 0, 0, 0, 0, 0), "low_annotation", "x")
    with pytest.raises(ValueError):
        DatasetManifest([e, e])


def test_manifest_rejects_recording_spanning_patients():
    e1 = ManifestEntry("s0", "r0", "p0", (1, 0, 0, 0, 0, 0), "low_annotation", "x")
    e2 = ManifestEntry("s1", "r0", "p1", (1, 0, 0, 0, 0, 0), "low_annotation", "x")
    with pytest.raises(ValueError):
        DatasetManifest([e1, e2])


def test_subset_tag_boundary():
    assert subset_tag([9, 0, 0, 0, 0, 0]) == "low_annotation"
    assert subset_tag([5, 5, 0, 0, 0, 0]) == "high_quality"
    assert HIGH_QUALITY_MIN_VOTES == 10


def test_manifest_csv_round_trip(tmp_path):
    manifest = make_manifest(n_patients=4, segments_per_patient=3, seed=1)
    path = tmp_path / "manifest.csv"
    save_manifest(manifest, path, header_comment="config_hash=abc seed=1")
    loaded = load_manifest(path)
    assert loaded.entries == manifest.entries
    assert loaded.root == tmp_path
    first = path.read_text().splitlines()[0]
    assert first.startswith("#")


def test_manifest_missing_column_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("segment_id,patient_id\ns0,p0\n")
    with pytest.raises(ValueError):
        load_manifest(path)


# --- fold splitting ---


def test_split_folds_balanced_case():
    manifest = make_manifest(n_patients=10, segments_per_patient=2, seed=0)
    folds = split_folds(manifest, k=5, seed=0)
    assert folds.fold_sizes() == [2, 2, 2, 2, 2]


def test_split_folds_deterministic():
    manifest = make_manifest(n_patients=9, segments_per_patient=2, seed=0)
    a = split_folds(manifest, k=4, seed=7)
    b = split_folds(manifest, k=4, seed=7)
    assert a.fold_of_patient == b.fold_of_patient


def test_split_folds_large_cohort_near_balanced():
    manifest = make_manifest(n_patients=1063, segments_per_patient=1, seed=2)
    folds = split_folds(manifest, k=5, seed=3)
    sizes = folds.fold_sizes()
    assert max(sizes) - min(sizes) <= 1
    assert sum(sizes) == 1063


def test_split_folds_errors():
    manifest = make_manifest(n_patients=3, segments_per_patient=1, seed=0)
    with pytest.raises(ValueError):
        split_folds(manifest, k=5, seed=0)
    with pytest.raises(ValueError):
        split_folds(manifest, k=1, seed=0)
    with pytest.raises(ValueError):
        split_folds(manifest, k=2, seed=0, balance="classes")


def test_split_folds_segment_balance_mode():
    manifest = make_manifest(n_patients=7, segments_per_patient=3, seed=4)
    folds = split_folds(manifest, k=3, seed=0, balance="segments")
    assert set(folds.fold_of_patient.values()) <= {0, 1, 2}
    assert len(folds.fold_of_patient) == 7


@given(st.integers(2, 5), st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_fold_hygiene_property(k, seed):
    rng = np.random.default_rng(seed)
    n_patients = int(rng.integers(k, 30))
    manifest = make_manifest(n_patients, int(rng.integers(1, 5)), seed=seed)
    folds = split_folds(manifest, k=k, seed=seed)
    by_patient = {}
    for e in manifest.entries:
        f = folds.fold_of(e.patient_id)
        by_patient.setdefault(e.patient_id, set()).add(f)
    assert all(len(v) == 1 for v in by_patient.values())
    sizes = folds.fold_sizes()
    assert max(sizes) - min(sizes) <= 1


# --- cohort summary ---


def test_summary_single_class_is_100_percent():
    entries = [
        ManifestEntry(f"s{i}", f"r{i}", f"p{i}", (3, 0, 0, 0, 0, 0),
                      "low_annotation", "x")
        for i in range(5)
    ]
    cols = summarize(DatasetManifest(entries))
    whole = cols[0]
    assert whole.class_counts == (5, 0, 0, 0, 0, 0)
    assert whole.class_percent[0] == 100.0


def test_summary_counts_match_tally_oracle():
    manifest = make_manifest(n_patients=12, segments_per_patient=4, seed=5)
    cols = summarize(manifest)
    tally = [0] * 6
    for e in manifest.entries:
        tally[int(np.argmax(e.votes))] += 1
    assert cols[0].class_counts == tuple(tally)
    for col in cols:
        if col.n_segments:
            assert abs(sum(col.class_percent) - 100.0) < 0.1


def test_summary_development_cohort_proportions():
    # whole-cohort class counts: 20,933 seizure of 106,800 segments = 19.6%
    counts = [20933, 14856, 16702, 16640, 18861, 18808]
    entries = []
    i = 0
    for cls, n in enumerate(counts):
        votes = tuple(1 if j == cls else 0 for j in range(6))
        for _ in range(n):
            entries.append(
                ManifestEntry(f"s{i}", "r0", "p0", votes, "low_annotation", "x")
            )
            i += 1
    cols = summarize(DatasetManifest(entries))
    whole = cols[0]
    assert whole.n_segments == 106_800
    assert whole.class_counts == tuple(counts)
    assert round(whole.class_percent[0], 1) == 19.6


def test_summary_rejects_empty_manifest():
    with pytest.raises(ValueError):
        summarize(DatasetManifest([]))


# --- signal files ---


def test_signal_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    seg = EegSegment(**seg_kwargs(samples=rng.normal(size=(16, 1000)).astype(np.float32)))
    path = tmp_path / "s0.eeg"
    write_signal(path, seg)
    loaded = read_signal(path)
    assert np.array_equal(loaded.samples, seg.samples)
    assert loaded.fs == seg.fs
    assert loaded.segment_id == seg.segment_id
    assert loaded.patient_id == seg.patient_id
    assert loaded.t_total_s == seg.t_total_s


def test_signal_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bad.eeg"
    path.write_bytes(b"not a signal file\n" + b"\x00" * 64)
    with pytest.raises(ValueError):
        read_signal(path)
