"""RR-interval ingestion, tachogram resampling, windowing and subject-wise splits."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

RR_MIN, RR_MAX = 0.2, 4.0
WINDOW_S = 1800
PRE_AF_HORIZON_S = 7200
EDGE_TOL_S = 5.0
LABELS = ("NSR", "AF")
SPLIT_NAMES = ("train", "val", "test")


class DataError(ValueError):
    pass


@dataclass
class RriRecord:
    """One subject's beat sequence.

    ``rr[i]`` is the interval ending at beat time ``rr_times[i]``; after
    cleaning, implausible intervals are dropped from ``rr``/``rr_times`` while
    ``beats`` keeps every timestamp. ``t_start``/``t_end`` bound the usable span.
    """

    subject_id: str
    label: str
    beats: np.ndarray
    rr: np.ndarray
    rr_times: np.ndarray
    af_onset: Optional[float] = None
    t_start: float = 0.0
    t_end: float = 0.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_beats(cls, subject_id: str, label: str, beats, af_onset: Optional[float] = None,
                   clean: bool = True) -> "RriRecord":
        beats = np.asarray(beats, dtype=np.float64)
        rr = np.diff(beats)
        rr_times = beats[1:]
        if clean:
            keep = (rr >= RR_MIN) & (rr <= RR_MAX)
            removed = int((~keep).sum())
            if removed:
                log.info("subject %s: removed %d implausible rr values", subject_id, removed)
            rr, rr_times = rr[keep], rr_times[keep]
        t0 = float(beats[0]) if beats.size else 0.0
        t1 = float(beats[-1]) if beats.size else 0.0
        return cls(subject_id, label, beats, rr, rr_times, af_onset, t0, t1)

    @property
    def duration(self) -> float:
        return self.t_end - self.t_start


@dataclass
class Segment:
    subject_id: str
    label: str
    values: np.ndarray
    window_index: int

    @property
    def target(self) -> int:
        return LABELS.index(self.label)


# -- CSV ------------------------------------------------------------------------

def load_rri_csv(path) -> RriRecord:
    """Parse ``subject_id,label,beat_time_s[,af_onset_s]`` (one row per beat)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:3] != ["subject_id", "label", "beat_time_s"]:
            raise DataError(f"{path}:1: unexpected header {header}")
        has_onset = len(header) > 3 and header[3] == "af_onset_s"
        subject = label = None
        onset: Optional[float] = None
        beats: List[float] = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise DataError(f"{path}:{line}: expected at least 3 fields, got {len(row)}")
            row_subject, row_label = row[0].strip(), row[1].strip()
            if row_label not in LABELS:
                raise DataError(f"{path}:{line}: unknown label {row_label!r}")
            if subject is None:
                subject, label = row_subject, row_label
            elif (row_subject, row_label) != (subject, label):
                raise DataError(f"{path}:{line}: expected one subject per file ({subject}/{label}), "
                                f"found {row_subject}/{row_label}")
            try:
                t = float(row[2])
            except ValueError:
                raise DataError(f"{path}:{line}: malformed beat_time_s {row[2]!r}") from None
            if not np.isfinite(t):
                raise DataError(f"{path}:{line}: non-finite beat_time_s {row[2]!r}")
            if beats and t <= beats[-1]:
                raise DataError(f"{path}:{line}: beat times not strictly increasing ({t} after {beats[-1]})")
            beats.append(t)
            if has_onset and len(row) > 3 and row[3].strip() and onset is None:
                try:
                    onset = float(row[3])
                except ValueError:
                    raise DataError(f"{path}:{line}: malformed af_onset_s {row[3]!r}") from None
    if not beats:
        raise DataError(f"{path}: no beats")
    return RriRecord.from_beats(subject, label, beats, onset)


def write_rri_csv(record: RriRecord, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        onset = record.af_onset
        w.writerow(["subject_id", "label", "beat_time_s"] + (["af_onset_s"] if onset is not None else []))
        tail = [f"{onset:.6f}"] if onset is not None else []
        for t in record.beats:
            w.writerow([record.subject_id, record.label, f"{t:.6f}"] + tail)


# -- record transforms ------------------------------------------------------------

def pre_af_crop(record: RriRecord, horizon: float = PRE_AF_HORIZON_S) -> Optional[RriRecord]:
    """Restrict an AF record to ``[onset - horizon, onset)``; ``None`` if history is too short.

    Records without an onset are returned unchanged.
    """
    if record.af_onset is None:
        return record
    onset = record.af_onset
    start = onset - horizon
    if start < record.beats[0] - 1e-9:
        log.warning("subject %s: only %.0f s before AF onset (< %.0f s), skipped",
                    record.subject_id, onset - record.beats[0], horizon)
        return None
    keep_b = (record.beats >= start) & (record.beats < onset)
    keep_r = (record.rr_times >= start) & (record.rr_times < onset)
    return RriRecord(record.subject_id, record.label, record.beats[keep_b], record.rr[keep_r],
                     record.rr_times[keep_r], onset, start, onset, dict(record.meta))


def interpolate_tachogram(rr_times: np.ndarray, rr: np.ndarray, sample_times: np.ndarray) -> np.ndarray:
    """Piecewise-linear tachogram, clamped beyond the first/last interval."""
    return np.interp(sample_times, rr_times, rr)


def resample_tachogram(record: RriRecord, t0: float, n: int = WINDOW_S, fs: float = 1.0,
                       edge_tol: float = EDGE_TOL_S) -> np.ndarray:
    """Sample the tachogram at ``t0 + k / fs`` for ``k < n``."""
    if record.rr.size == 0:
        raise DataError(f"subject {record.subject_id}: no rr intervals to resample")
    t_last = t0 + (n - 1) / fs
    if record.rr_times[0] > t0 + edge_tol or record.rr_times[-1] < t_last - edge_tol:
        raise DataError(
            f"subject {record.subject_id}: window [{t0:.1f}, {t0 + n / fs:.1f}) not covered by "
            f"rr data spanning [{record.rr_times[0]:.1f}, {record.rr_times[-1]:.1f}]"
        )
    return interpolate_tachogram(record.rr_times, record.rr, t0 + np.arange(n) / fs)


def window_segments(record: RriRecord, window_s: int = WINDOW_S) -> List[Segment]:
    """Consecutive non-overlapping windows from ``t_start``; the trailing remainder is dropped."""
    n_win = int(np.floor(record.duration / window_s + 1e-9))
    return [
        Segment(record.subject_id, record.label, resample_tachogram(record, record.t_start + w * window_s, window_s),
                w)
        for w in range(n_win)
    ]


# -- splits -------------------------------------------------------------------------

@dataclass
class SplitPlan:
    seed: int
    train: Dict[str, List[str]]
    val: Dict[str, List[str]]
    test: Dict[str, List[str]]
    ratios: tuple = (0.6, 0.2, 0.2)

    def subjects(self, split: str) -> List[str]:
        return [s for ds in sorted(getattr(self, split)) for s in getattr(self, split)[ds]]

    def assignment(self) -> Dict[str, str]:
        out = {}
        for split in SPLIT_NAMES:
            for s in self.subjects(split):
                if s in out:
                    raise DataError(f"seed {self.seed}: subject {s} in both {out[s]} and {split}")
                out[s] = split
        return out

    def to_dict(self) -> dict:
        return {"seed": self.seed, "ratios": list(self.ratios), "train": self.train, "val": self.val,
                "test": self.test}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(d["seed"], d["train"], d["val"], d["test"], tuple(d.get("ratios", (0.6, 0.2, 0.2))))


def split_counts(n: int, train_ratio: float = 0.6) -> tuple:
    """(train, val, test) sizes: floor of 60 %, then the rest halved (val floored)."""
    n_train = int(np.floor(n * train_ratio + 1e-9))
    rest = n - n_train
    n_val = rest // 2
    return n_train, n_val, rest - n_val


def make_splits(subjects_by_dataset: Mapping[str, Sequence[str]], seeds: Iterable[int]) -> List[SplitPlan]:
    """One subject-wise plan per seed; each dataset is shuffled independently."""
    plans = []
    for seed in seeds:
        parts = {k: {} for k in SPLIT_NAMES}
        for ds_index, ds in enumerate(sorted(subjects_by_dataset)):
            subjects = sorted(subjects_by_dataset[ds])
            if len(set(subjects)) != len(subjects):
                raise DataError(f"dataset {ds}: duplicate subject ids")
            order = np.random.default_rng([seed, ds_index]).permutation(len(subjects))
            shuffled = [subjects[i] for i in order]
            n_tr, n_va, _ = split_counts(len(shuffled))
            parts["train"][ds] = shuffled[:n_tr]
            parts["val"][ds] = shuffled[n_tr:n_tr + n_va]
            parts["test"][ds] = shuffled[n_tr + n_va:]
        plan = SplitPlan(seed, parts["train"], parts["val"], parts["test"])
        plan.assignment()
        plans.append(plan)
    return plans


# -- segment cache ------------------------------------------------------------------

def write_segment_cache(path, segments: Sequence[Segment], splits: Optional[Mapping[str, str]] = None,
                        seed: Optional[int] = None) -> None:
    """Write ``<path>.f32`` (little-endian float32, one row per segment) and ``<path>.json``."""
    path = Path(path)
    arr = np.stack([s.values for s in segments]).astype("<f4") if segments else np.zeros((0, WINDOW_S), "<f4")
    path.with_suffix(".f32").write_bytes(arr.tobytes())
    index = [
        {"subject_id": s.subject_id, "label": s.label, "window_index": s.window_index,
         "split": (splits or {}).get(s.subject_id), "seed": seed}
        for s in segments
    ]
    meta = {"n_segments": len(segments), "length": int(arr.shape[1]) if arr.ndim == 2 else WINDOW_S,
            "dtype": "float32-le", "segments": index}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_segment_cache(path) -> tuple:
    """Return ``(values [n, L] float64, index entries)``."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4")
    n, length = meta["n_segments"], meta["length"]
    if raw.size != n * length:
        raise DataError(f"{path}: cache holds {raw.size} values, index expects {n}x{length}")
    return raw.reshape(n, length).astype(np.float64), meta["segments"]
