"""Segments, annotations, montage, manifests, folds and cohort summaries.

The six activity classes use one fixed order everywhere: labels, vote
vectors, prediction vectors and report rows all index classes the same way.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ClassId(enum.IntEnum):
    SEIZURE = 0
    LPD = 1
    GPD = 2
    LRDA = 3
    GRDA = 4
    OTHER = 5


N_CLASSES = 6
CLASS_NAMES = ("seizure", "lpd", "gpd", "lrda", "grda", "other")

# Classic 10-20 scalp electrode labels.
ELECTRODES_1020 = frozenset(
    "Fp1 Fp2 F7 F3 Fz F4 F8 T3 C3 Cz C4 T4 T5 P3 Pz P4 T6 O1 O2".split()
)

SUBSET_LOW = "low_annotation"
SUBSET_HIGH = "high_quality"
HIGH_QUALITY_MIN_VOTES = 10

MANIFEST_COLUMNS = (
    "segment_id",
    "recording_id",
    "patient_id",
    "votes_seizure",
    "votes_lpd",
    "votes_gpd",
    "votes_lrda",
    "votes_grda",
    "votes_other",
    "subset",
    "path",
)

LEFT_CHANNELS = (0, 1, 2, 3, 8, 9, 10, 11)
RIGHT_CHANNELS = (4, 5, 6, 7, 12, 13, 14, 15)


class MissingElectrodeError(KeyError):
    """Raised when a montage names an electrode absent from the input."""


@dataclass(frozen=True)
class Montage:
    """Ordered bipolar derivations: each output channel is anode - cathode."""

    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if len(self.pairs) != 16:
            raise ValueError(f"montage must have 16 pairs, got {len(self.pairs)}")
        for anode, cathode in self.pairs:
            for name in (anode, cathode):
                if name not in ELECTRODES_1020:
                    raise ValueError(f"not a 10-20 electrode label: {name!r}")

    @property
    def chains(self) -> tuple[tuple[tuple[str, str], ...], ...]:
        """Four front-to-back chains of four derivations each."""
        return tuple(self.pairs[i : i + 4] for i in range(0, 16, 4))

    @property
    def electrodes(self) -> frozenset[str]:
        return frozenset(e for pair in self.pairs for e in pair)


def standard_double_banana() -> Montage:
    """Longitudinal bipolar montage in chain-major order: LT, RT, LP, RP."""
    return Montage(
        pairs=(
            ("Fp1", "F7"), ("F7", "T3"), ("T3", "T5"), ("T5", "O1"),
            ("Fp2", "F8"), ("F8", "T4"), ("T4", "T6"), ("T6", "O2"),
            ("Fp1", "F3"), ("F3", "C3"), ("C3", "P3"), ("P3", "O1"),
            ("Fp2", "F4"), ("F4", "C4"), ("C4", "P4"), ("P4", "O2"),
        )
    )


def apply_montage(
    referential: np.ndarray, channel_names: Sequence[str], montage: Montage
) -> np.ndarray:
    """Re-reference an [electrodes x T] referential matrix to bipolar channels.

    Row i of the result is anode_i - cathode_i.
    """
    index = {name: i for i, name in enumerate(channel_names)}
    for anode, cathode in montage.pairs:
        for name in (anode, cathode):
            if name not in index:
                raise MissingElectrodeError(name)
    rows = [referential[index[a]] - referential[index[c]] for a, c in montage.pairs]
    return np.stack(rows)


@dataclass
class EegSegment:
    """One bipolar-montage EEG window in microvolts (or dimensionless 0-255
    after scaling)."""

    samples: np.ndarray  # [16 x T]
    fs: float
    segment_id: str
    recording_id: str
    patient_id: str
    t_total_s: float
    t_center_s: float

    def __post_init__(self):
        n_ch, t = self.samples.shape
        if abs(t - self.fs * self.t_total_s) > 1e-9:
            raise ValueError(
                f"sample count {t} != fs*t_total ({self.fs}*{self.t_total_s})"
            )
        if abs(self.t_center_s - self.t_total_s / 5) > 1e-9:
            raise ValueError("t_center_s must be t_total_s / 5")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"non-finite samples in segment {self.segment_id}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def with_samples(self, samples: np.ndarray) -> "EegSegment":
        return EegSegment(
            samples=samples,
            fs=self.fs,
            segment_id=self.segment_id,
            recording_id=self.recording_id,
            patient_id=self.patient_id,
            t_total_s=self.t_total_s,
            t_center_s=self.t_center_s,
        )


def soft_label(votes: np.ndarray) -> np.ndarray:
    """Vote counts -> probability vector (divide by total votes)."""
    votes = np.asarray(votes, dtype=np.float64)
    if votes.shape != (N_CLASSES,):
        raise ValueError(f"votes must have shape ({N_CLASSES},)")
    if np.any(votes < 0):
        raise ValueError("negative vote count")
    total = votes.sum()
    if total < 1:
        raise ValueError("segment has zero votes")
    return votes / total


def consensus(votes: np.ndarray) -> ClassId:
    """Most-voted class; ties go to the lowest class index."""
    votes = np.asarray(votes)
    if votes.sum() < 1:
        raise ValueError("segment has zero votes")
    return ClassId(int(np.argmax(votes)))


@dataclass(frozen=True)
class ManifestEntry:
    segment_id: str
    recording_id: str
    patient_id: str
    votes: tuple[int, ...]
    subset: str
    path: str

    def votes_array(self) -> np.ndarray:
        return np.array(self.votes, dtype=np.int64)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path | None = None

    def __post_init__(self):
        seen_ids = set()
        rec_patient: dict[str, str] = {}
        for e in self.entries:
            if e.segment_id in seen_ids:
                raise ValueError(f"duplicate segment_id {e.segment_id}")
            seen_ids.add(e.segment_id)
            prev = rec_patient.setdefault(e.recording_id, e.patient_id)
            if prev != e.patient_id:
                raise ValueError(
                    f"recording {e.recording_id} maps to patients {prev} and {e.patient_id}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def patients(self) -> list[str]:
        return sorted({e.patient_id for e in self.entries})

    def votes_matrix(self) -> np.ndarray:
        return np.array([e.votes for e in self.entries], dtype=np.int64)

    def consensus_labels(self) -> np.ndarray:
        return np.array([int(consensus(e.votes_array())) for e in self.entries])

    def soft_labels(self) -> np.ndarray:
        return np.stack([soft_label(e.votes_array()) for e in self.entries])

    def subset_of(self, tag: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.subset == tag], root=self.root)

    def segment_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def subset_tag(votes: Iterable[int]) -> str:
    return SUBSET_HIGH if sum(votes) >= HIGH_QUALITY_MIN_VOTES else SUBSET_LOW


def save_manifest(manifest: DatasetManifest, path: Path, header_comment: str | None = None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow(
                [e.segment_id, e.recording_id, e.patient_id, *e.votes, e.subset, e.path]
            )


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    entries = []
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"manifest {path} missing columns: {sorted(missing)}")
    for row in reader:
        votes = tuple(int(row[f"votes_{name}"]) for name in CLASS_NAMES)
        entries.append(
            ManifestEntry(
                segment_id=row["segment_id"],
                recording_id=row["recording_id"],
                patient_id=row["patient_id"],
                votes=votes,
                subset=row["subset"],
                path=row["path"],
            )
        )
    return DatasetManifest(entries, root=path.parent)


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_patient: dict[str, int]
    k: int

    def fold_of(self, patient_id: str) -> int:
        return self.fold_of_patient[patient_id]

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.k
        for f in self.fold_of_patient.values():
            sizes[f] += 1
        return sizes


def split_folds(
    manifest: DatasetManifest, k: int, seed: int, balance: str = "patients"
) -> FoldAssignment:
    """Assign every patient to one of k folds.

    balance="patients" spreads patient counts evenly (sizes differ by at most
    one); balance="segments" greedily evens segment counts instead.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    patients = manifest.patients()
    if len(patients) < k:
        raise ValueError(f"need at least {k} patients, have {len(patients)}")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    assignment: dict[str, int] = {}
    if balance == "patients":
        for i, pid in enumerate(order):
            assignment[pid] = i % k
    elif balance == "segments":
        seg_count: dict[str, int] = {}
        for e in manifest.entries:
            seg_count[e.patient_id] = seg_count.get(e.patient_id, 0) + 1
        loads = [0] * k
        for pid in sorted(order, key=lambda p: -seg_count.get(p, 0)):
            f = int(np.argmin(loads))
            assignment[pid] = f
            loads[f] += seg_count.get(pid, 0)
    else:
        raise ValueError(f"unknown balance mode {balance!r}")
    return FoldAssignment(assignment, k)


@dataclass
class CohortSummary:
    """Per-class segment counts and percentages for one column of the cohort
    table."""

    label: str
    n_patients: int
    n_segments: int
    class_counts: tuple[int, ...]

    @property
    def class_percent(self) -> tuple[float, ...]:
        if self.n_segments == 0:
            return tuple(0.0 for _ in CLASS_NAMES)
        return tuple(100.0 * c / self.n_segments for c in self.class_counts)


def summarize(manifest: DatasetManifest) -> list[CohortSummary]:
    """Count segments by consensus class for the whole cohort and each subset."""
    if not manifest.entries:
        raise ValueError("empty manifest")
    columns = []
    for label, entries in (
        ("whole", manifest.entries),
        (SUBSET_LOW, [e for e in manifest.entries if e.subset == SUBSET_LOW]),
        (SUBSET_HIGH, [e for e in manifest.entries if e.subset == SUBSET_HIGH]),
    ):
        counts = [0] * N_CLASSES
        for e in entries:
            counts[int(consensus(e.votes_array()))] += 1
        columns.append(
            CohortSummary(
                label=label,
                n_patients=len({e.patient_id for e in entries}),
                n_segments=len(entries),
                class_counts=tuple(counts),
            )
        )
    return columns


def format_summary(columns: list[CohortSummary]) -> str:
    lines = ["{:<10}".format("class") + "".join(f"{c.label:>24}" for c in columns)]
    lines.append(
        "{:<10}".format("patients") + "".join(f"{c.n_patients:>24}" for c in columns)
    )
    lines.append(
        "{:<10}".format("segments") + "".join(f"{c.n_segments:>24}" for c in columns)
    )
    for i, name in enumerate(CLASS_NAMES):
        cells = [
            f"{c.class_counts[i]:>14} ({c.class_percent[i]:5.1f}%)" for c in columns
        ]
        lines.append("{:<10}".format(name) + "".join(f"{s:>24}" for s in cells))
    return "\n".join(lines)


# --- per-segment signal files: 8-line text header + raw float32 samples ---

SIGNAL_MAGIC = "eegimage-signal v1"


def write_signal(path: Path, seg: EegSegment) -> None:
    n_ch, t = seg.samples.shape
    header = (
        f"{SIGNAL_MAGIC}\n"
        f"segment_id={seg.segment_id}\n"
        f"recording_id={seg.recording_id}\n"
        f"patient_id={seg.patient_id}\n"
        f"fs={seg.fs!r}\n"
        f"channels={n_ch}\n"
        f"samples={t}\n"
        f"dtype=float32\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(seg.samples, dtype="<f4").tobytes())


def read_signal(path: Path) -> EegSegment:
    path = Path(path)
    with open(path, "rb") as f:
        header_lines = [f.readline().decode("ascii").rstrip("\n") for _ in range(8)]
        if header_lines[0] != SIGNAL_MAGIC:
            raise ValueError(f"{path}: not a {SIGNAL_MAGIC} file")
        meta = dict(line.split("=", 1) for line in header_lines[1:])
        n_ch = int(meta["channels"])
        t = int(meta["samples"])
        if meta["dtype"] != "float32":
            raise ValueError(f"{path}: unsupported dtype {meta['dtype']}")
        raw = f.read(n_ch * t * 4)
    samples = np.frombuffer(raw, dtype="<f4").reshape(n_ch, t).astype(np.float32)
    fs = float(meta["fs"])
    t_total = t / fs
    return EegSegment(
        samples=samples,
        fs=fs,
        segment_id=meta["segment_id"],
        recording_id=meta["recording_id"],
        patient_id=meta["patient_id"],
        t_total_s=t_total,
        t_center_s=t_total / 5,
    )
