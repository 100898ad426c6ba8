"""Persistent state across validation waves (pilot = wave 0, then 1, 2, ...)."""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from filelock import FileLock, Timeout

from alistudy.audit import Confusion, QualityReport
from alistudy.designs import ValidationSelection
from alistudy.errors import DataError, StateError
from alistudy.io import atomic_write_text

STATE_VERSION = 1
LOCK_TIMEOUT = 10.0


@dataclass
class WaveRecord:
    index: int
    ids: list
    design: dict | None = None
    counts: dict = field(default_factory=dict)


@dataclass
class WaveState:
    """Cumulative validated ids, per-wave provenance and pooled quality counts."""

    budget: int
    waves: list = field(default_factory=list)
    counts: dict = field(default_factory=lambda: {"tp": 0, "fn": 0, "fp": 0, "tn": 0, "recovered": 0, "missing": 0})

    def __post_init__(self):
        self.waves = [w if isinstance(w, WaveRecord) else WaveRecord(**w) for w in self.waves]
        seen = set()
        for w in self.waves:
            overlap = seen.intersection(w.ids)
            if overlap:
                raise StateError(f"wave {w.index} repeats validated ids {sorted(map(str, overlap))[:10]}")
            seen.update(w.ids)
        if len(seen) > self.budget:
            raise StateError(f"{len(seen)} validated ids exceed the budget of {self.budget}")

    @property
    def wave_index(self) -> int:
        """Index of the last completed wave, -1 before the pilot."""
        return len(self.waves) - 1

    @property
    def validated_ids(self) -> list:
        return [pid for w in self.waves for pid in w.ids]

    @property
    def n_validated(self) -> int:
        return sum(len(w.ids) for w in self.waves)

    @property
    def remaining(self) -> int:
        return self.budget - self.n_validated

    @property
    def confusion(self) -> Confusion:
        c = self.counts
        return Confusion(c["tp"], c["fn"], c["fp"], c["tn"])

    @property
    def quality(self) -> dict:
        conf = self.confusion
        c = self.counts
        return {"tpr": conf.tpr, "fpr": conf.fpr,
                "recovery_rate": c["recovered"] / c["missing"] if c["missing"] else None}

    def to_dict(self) -> dict:
        return {"version": STATE_VERSION, "budget": self.budget, "counts": dict(self.counts),
                "waves": [asdict(w) for w in self.waves]}

    @classmethod
    def from_dict(cls, d: dict) -> "WaveState":
        if d.get("version") != STATE_VERSION:
            raise StateError(f"unsupported wave-state version {d.get('version')!r}")
        return cls(budget=int(d["budget"]), waves=d["waves"], counts=d["counts"])

    def summary(self) -> dict:
        return {"wave_index": self.wave_index, "n_validated": self.n_validated, "budget": self.budget,
                "remaining": self.remaining, "quality": self.quality, "counts": dict(self.counts),
                "waves": [{"index": w.index, "n": len(w.ids), "design": w.design} for w in self.waves]}


def _report_counts(report: QualityReport | None) -> dict:
    if report is None:
        return {"tp": 0, "fn": 0, "fp": 0, "tn": 0, "recovered": 0, "missing": 0}
    o = report.overall
    return {"tp": o.tp, "fn": o.fn, "fp": o.fp, "tn": o.tn, "recovered": report.recovered, "missing": report.missing}


def advance_wave(state: WaveState, selection, report: QualityReport | None = None) -> WaveState:
    """New state with ``selection`` recorded as the next wave.

    ``selection`` is a ``ValidationSelection`` or a list of ids. The wave's
    quality counts (from ``report``) are pooled into the running totals, so
    the quality estimates always reflect every finding to date.
    """
    if isinstance(selection, ValidationSelection):
        ids, design = list(selection.ids.tolist()), selection.spec.to_dict()
    else:
        ids, design = list(selection), None
    if len(set(ids)) != len(ids):
        raise DataError("selection lists a patient more than once")
    overlap = set(state.validated_ids).intersection(ids)
    if overlap:
        raise DataError(f"selection overlaps earlier waves: {sorted(map(str, overlap))[:10]}")
    if state.n_validated + len(ids) > state.budget:
        raise DataError(f"selection of {len(ids)} exceeds the remaining budget of {state.remaining}")
    wave_counts = _report_counts(report)
    counts = {k: state.counts[k] + wave_counts[k] for k in state.counts}
    record = WaveRecord(state.wave_index + 1, ids, design, wave_counts)
    return replace(state, waves=[*state.waves, record], counts=counts)


def backup_path(path) -> Path:
    return Path(str(path) + ".bak")


def lock_for(path) -> FileLock:
    return FileLock(str(path) + ".lock", timeout=LOCK_TIMEOUT)


def load_state(path) -> WaveState:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            return WaveState.from_dict(json.load(fh))
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError, StateError) as exc:
        raise StateError(f"wave state {path} is unreadable ({exc}); refusing to proceed. "
                         f"The previous state is kept at {backup_path(path)}") from None


def save_state(state: WaveState, path):
    """Atomic write; the file being replaced is first copied to ``<path>.bak``."""
    path = Path(path)
    if path.exists():
        shutil.copy2(path, backup_path(path))
    atomic_write_text(path, json.dumps(state.to_dict(), indent=2) + "\n")


def update_state(path, selection, report: QualityReport | None = None, budget: int | None = None) -> WaveState:
    """Load (or create with ``budget``), advance and save under an exclusive lock."""
    try:
        with lock_for(path):
            if os.path.exists(path):
                state = load_state(path)
            elif budget is None:
                raise DataError(f"no wave state at {path}; pass a budget to start one")
            else:
                state = WaveState(budget=int(budget))
            new = advance_wave(state, selection, report)
            save_state(new, path)
            return new
    except Timeout:
        raise StateError(f"wave state {path} is locked by another process") from None
