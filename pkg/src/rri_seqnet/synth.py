"""Synthetic RR-interval records with a rising pre-AF ectopic burden."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List

import numpy as np

from .data import PRE_AF_HORIZON_S, RR_MAX, RR_MIN, RriRecord

KINDS = ("NSR", "preAF")


@dataclass
class SynthConfig:
    mean_rr: float = 0.85
    sd_rr: float = 0.05
    resp_amp: float = 0.04
    resp_period_beats: float = 4.0
    ectopic_short: float = 0.6
    ectopic_comp: float = 1.4
    nsr_rate: float = 0.01
    preaf_rate_start: float = 0.01
    preaf_rate_end: float = 0.15
    final_var_inflation: float = 2.0
    final_window_s: float = 1800.0
    preaf_duration_s: float = PRE_AF_HORIZON_S
    nsr_duration_s: float = 19800.0

    def to_dict(self) -> dict:
        return asdict(self)


def _subject_rng(seed: int, kind: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, KINDS.index(kind), index])


def _generate_rr(rng: np.random.Generator, duration: float, preaf: bool, cfg: SynthConfig):
    n = int(duration / (cfg.mean_rr * 0.7)) + 64
    i = np.arange(n)
    dev = rng.normal(0.0, cfg.sd_rr, n)
    t_approx = np.cumsum(cfg.mean_rr + dev)
    if preaf:
        final = t_approx >= duration - cfg.final_window_s
        dev[final] *= np.sqrt(cfg.final_var_inflation)
        frac = np.clip(t_approx / duration, 0.0, 1.0)
        rate = cfg.preaf_rate_start + (cfg.preaf_rate_end - cfg.preaf_rate_start) * frac
    else:
        rate = np.full(n, cfg.nsr_rate)
    base = cfg.mean_rr + dev
    rr = base + cfg.resp_amp * np.sin(2 * np.pi * i / cfg.resp_period_beats)
    draws = rng.random(n) < rate
    ectopic = []
    last = -2
    for k in np.flatnonzero(draws[:-1]):
        # an event occupies beats k (premature) and k+1 (compensatory pause)
        if k <= last + 1:
            continue
        rr[k] = cfg.ectopic_short * base[k]
        rr[k + 1] = cfg.ectopic_comp * base[k + 1]
        ectopic.append(k)
        last = k
    rr = np.clip(rr, RR_MIN, RR_MAX)
    return rr, np.asarray(ectopic, dtype=int)


def synth_record(subject_id: str, kind: str, rng: np.random.Generator, cfg: SynthConfig) -> RriRecord:
    preaf = kind == "preAF"
    duration = cfg.preaf_duration_s if preaf else cfg.nsr_duration_s
    rr, ectopic = _generate_rr(rng, duration, preaf, cfg)
    beats = np.concatenate([[0.0], np.cumsum(rr)])
    # keep beats through the first one at or past the end of the span
    stop = int(np.searchsorted(beats, duration)) + 1
    if stop > beats.size:
        raise RuntimeError("synthetic record too short; increase the beat budget")
    # round-trip through the CSV precision so in-memory and reloaded records agree
    beats = np.round(beats[:stop], 6)
    rec = RriRecord.from_beats(subject_id, "AF" if preaf else "NSR", beats, af_onset=duration if preaf else None)
    ectopic = ectopic[ectopic + 1 < stop]
    rec.meta["ectopic_times"] = beats[ectopic + 1]
    return rec


def synth_generate(n_subjects: int, kind: str, seed: int, cfg: SynthConfig | None = None) -> List[RriRecord]:
    """Generate ``n_subjects`` records of ``kind`` ('NSR' or 'preAF').

    Each subject draws from its own stream keyed on (seed, kind, index), so
    records do not depend on how many others are generated.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    cfg = cfg or SynthConfig()
    prefix = "nsr" if kind == "NSR" else "af"
    return [synth_record(f"{prefix}{i:03d}", kind, _subject_rng(seed, kind, i), cfg) for i in range(n_subjects)]


def ectopic_counts(record: RriRecord, t0: float, t1: float) -> int:
    """Ground-truth ectopic events whose premature beat falls in ``[t0, t1)``."""
    times = record.meta.get("ectopic_times", np.empty(0))
    return int(((times >= t0) & (times < t1)).sum())
