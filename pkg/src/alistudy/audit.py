"""Chart-review audit workbooks, findings and data-quality metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

import numpy as np
import pandas as pd

from alistudy.ali import COMPONENTS, ComponentMeasurement, StressorProfile, ThresholdTable, classify_component
from alistudy.errors import ConfigurationError, DataError, IncompleteAuditError

WORKBOOK_COLUMNS = ["patient_id", "encounter_date", "variable", "extracted_value", "roadmap_hint", "reviewed_value", "notes"]
KEY_COLUMNS = ["patient_id", "encounter_date"]
PASSTHROUGH_COLUMNS = {"sex"}
NOT_FOUND = "not found"
MATCH_TOL = 1e-9


class Finding(str, Enum):
    EXTRACTED_CORRECT = "ExtractedCorrect"
    EXTRACTED_INCORRECT = "ExtractedIncorrect"
    EXTRACTED_NOT_FOUND = "ExtractedNotFound"
    AUXILIARY_FOUND = "AuxiliaryFound"
    AUXILIARY_NOT_FOUND = "AuxiliaryNotFound"

    def __str__(self):
        return self.value


@dataclass
class AuditRow:
    patient_id: object
    encounter_date: object
    variable: str
    extracted_value: Optional[float] = None
    roadmap_hint: str = ""
    reviewed_value: Optional[str] = None
    notes: str = ""

    @classmethod
    def from_mapping(cls, m: Mapping) -> "AuditRow":
        return cls(**{c: m.get(c) for c in WORKBOOK_COLUMNS})


def _is_blank(v) -> bool:
    if v is None:
        return True
    if isinstance(v, float) and math.isnan(v):
        return True
    return isinstance(v, str) and not v.strip()


def _as_number(v) -> Optional[float]:
    if isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool):
        return float(v)
    try:
        x = float(str(v).strip())
    except ValueError:
        return None
    return x if math.isfinite(x) else None


def _is_not_found(v) -> bool:
    return isinstance(v, str) and v.strip().lower() == NOT_FOUND


def widen_to_long(wide: pd.DataFrame, table: ThresholdTable | None = None) -> pd.DataFrame:
    """One workbook row per (patient, encounter, variable).

    Missing cells keep a row, carrying the roadmap's auxiliary terms as a hint.
    ``reviewed_value`` and ``notes`` are appended empty. A ``sex`` column is
    accepted and left out of the workbook.
    """
    table = table or ThresholdTable.default()
    missing_keys = [c for c in KEY_COLUMNS if c not in wide.columns]
    if missing_keys and len(wide.columns):
        raise DataError(f"extract is missing key columns {missing_keys}")
    variables = [c for c in wide.columns if c not in KEY_COLUMNS and c not in PASSTHROUGH_COLUMNS]
    unknown = [c for c in variables if c not in COMPONENTS]
    if unknown:
        raise DataError(f"unknown variable columns in extract: {unknown}")
    rows = []
    for rec in wide.to_dict("records"):
        for var in variables:
            val = rec[var]
            absent = _is_blank(val)
            rows.append({
                "patient_id": rec["patient_id"],
                "encounter_date": rec["encounter_date"],
                "variable": var,
                "extracted_value": np.nan if absent else float(val),
                "roadmap_hint": "; ".join(table.aux_terms(var)) if absent else "",
                "reviewed_value": "",
                "notes": "",
            })
    return pd.DataFrame(rows, columns=WORKBOOK_COLUMNS)


def long_to_wide(workbook: pd.DataFrame) -> pd.DataFrame:
    """Inverse of ``widen_to_long`` on the extracted values."""
    if workbook.empty:
        return pd.DataFrame(columns=KEY_COLUMNS)
    variables = list(dict.fromkeys(workbook["variable"]))
    wide = workbook.pivot_table(
        index=KEY_COLUMNS, columns="variable", values="extracted_value", aggfunc="first", dropna=False, sort=False
    )
    order = workbook[KEY_COLUMNS].drop_duplicates()
    wide = wide.reindex(pd.MultiIndex.from_frame(order))[variables].reset_index()
    wide.columns.name = None
    return wide


def classify_finding(row) -> Finding:
    """Audit finding for one completed workbook row."""
    r = row if isinstance(row, AuditRow) else AuditRow.from_mapping(row)
    where = f"patient {r.patient_id}, encounter {r.encounter_date}, variable {r.variable}"
    if _is_blank(r.reviewed_value):
        raise IncompleteAuditError(f"reviewed value is blank for {where}")
    extracted = None if _is_blank(r.extracted_value) else _as_number(r.extracted_value)
    reviewed = r.reviewed_value
    if extracted is not None:
        if _is_not_found(reviewed):
            return Finding.EXTRACTED_NOT_FOUND
        num = _as_number(reviewed)
        if num is None:
            raise DataError(f"reviewed value {reviewed!r} for a non-missing component must be a number or 'Not Found' ({where})")
        return Finding.EXTRACTED_CORRECT if abs(num - extracted) <= MATCH_TOL else Finding.EXTRACTED_INCORRECT
    if _is_not_found(reviewed):
        return Finding.AUXILIARY_NOT_FOUND
    return Finding.AUXILIARY_FOUND


def classify_workbook(workbook: pd.DataFrame) -> pd.DataFrame:
    out = workbook.copy()
    out["finding"] = [classify_finding(r).value for r in workbook.to_dict("records")]
    return out


def validated_profiles(
    findings: pd.DataFrame,
    sex_by_patient: Mapping | None = None,
    table: ThresholdTable | None = None,
) -> dict:
    """Per-patient (EHR profile, validated profile) from a classified workbook.

    EHR stressors use the mean extracted value. Validated stressors use the
    mean of the confirmed or corrected values; values the auditor could not
    find are dropped. A component missing from the EHR is recovered as 1 when
    auxiliary information was found, or thresholded when the auditor found an
    actual measurement.
    """
    table = table or ThresholdTable.default()
    sex_by_patient = sex_by_patient or {}
    if "finding" not in findings.columns:
        findings = classify_workbook(findings)
    out = {}
    for pid, grp in findings.groupby("patient_id", sort=False):
        sex = sex_by_patient.get(pid)
        pre, post, rec = {}, {}, {}
        for comp in COMPONENTS:
            rows = grp[grp["variable"] == comp]
            ext = [float(v) for v in rows["extracted_value"] if not _is_blank(v)]
            pre_val = float(np.mean(ext)) if ext else None
            pre[comp] = classify_component(ComponentMeasurement(comp, pre_val, sex), table)
            if pre_val is not None:
                vals = [_as_number(v) for v, f in zip(rows["reviewed_value"], rows["finding"])
                        if f in (Finding.EXTRACTED_CORRECT.value, Finding.EXTRACTED_INCORRECT.value)]
                post_val = float(np.mean(vals)) if vals else None
                post[comp] = classify_component(ComponentMeasurement(comp, post_val, sex), table)
            else:
                found = rows[rows["finding"] == Finding.AUXILIARY_FOUND.value]["reviewed_value"].tolist()
                nums = [x for x in (_as_number(v) for v in found) if x is not None]
                if nums:
                    post[comp] = classify_component(ComponentMeasurement(comp, float(np.mean(nums)), sex), table)
                    rec[comp] = True
                elif found:
                    post[comp] = 1
                    rec[comp] = True
                else:
                    post[comp] = None
        out[pid] = (StressorProfile(pre), StressorProfile(post, rec))
    return out


def _rate(num, den) -> Optional[float]:
    return num / den if den else None


@dataclass
class Confusion:
    tp: int = 0  # EHR 1, validated 1
    fn: int = 0  # EHR 0, validated 1
    fp: int = 0  # EHR 1, validated 0
    tn: int = 0  # EHR 0, validated 0

    def add(self, ehr: int, val: int):
        if val == 1:
            if ehr == 1:
                self.tp += 1
            else:
                self.fn += 1
        elif ehr == 1:
            self.fp += 1
        else:
            self.tn += 1

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.fp + self.tn

    @property
    def tpr(self):
        return _rate(self.tp, self.tp + self.fn)

    @property
    def fpr(self):
        return _rate(self.fp, self.fp + self.tn)

    @property
    def ppv(self):
        """Pr(validated = 1 | EHR = 1), the reverse conditioning."""
        return _rate(self.tp, self.tp + self.fp)

    @property
    def false_omission(self):
        """Pr(validated = 1 | EHR = 0)."""
        return _rate(self.fn, self.fn + self.tn)


@dataclass
class QualityReport:
    overall: Confusion
    per_component: dict
    recovered: int
    missing: int
    recovered_by_component: dict
    missing_by_component: dict
    finding_counts: dict = field(default_factory=dict)

    @property
    def tpr(self):
        return self.overall.tpr

    @property
    def fpr(self):
        return self.overall.fpr

    @property
    def recovery_rate(self):
        return _rate(self.recovered, self.missing)

    def to_dict(self) -> dict:
        def conf(c: Confusion):
            return {"tp": c.tp, "fn": c.fn, "fp": c.fp, "tn": c.tn, "tpr": c.tpr, "fpr": c.fpr,
                    "ppv": c.ppv, "false_omission_rate": c.false_omission}

        return {
            "tpr": self.tpr,
            "fpr": self.fpr,
            "recovery_rate": self.recovery_rate,
            "recovered_components": self.recovered,
            "missing_components": self.missing,
            "confusion": conf(self.overall),
            "per_component": {
                comp: {**conf(c), "recovered": self.recovered_by_component.get(comp, 0),
                       "missing": self.missing_by_component.get(comp, 0),
                       "recovery_rate": _rate(self.recovered_by_component.get(comp, 0), self.missing_by_component.get(comp, 0))}
                for comp, c in self.per_component.items()
            },
            "finding_counts": dict(self.finding_counts),
        }

    def to_frame(self) -> pd.DataFrame:
        """Long per-component metrics (component, metric, value), heatmap-ready."""
        rows = []
        for comp, d in self.to_dict()["per_component"].items():
            for metric in ("tp", "fn", "fp", "tn", "tpr", "fpr", "recovered", "missing", "recovery_rate"):
                v = d[metric]
                rows.append({"component": comp, "metric": metric, "value": np.nan if v is None else v})
        return pd.DataFrame(rows, columns=["component", "metric", "value"])


def audited_components(findings: pd.DataFrame) -> dict:
    """Components that have at least one workbook row, per patient."""
    return {pid: set(grp["variable"]) for pid, grp in findings.groupby("patient_id", sort=False)}


def quality_from_profiles(profiles, finding_counts=None, audited: Mapping | None = None) -> QualityReport:
    """Quality metrics from (EHR profile, validated profile) pairs.

    TPR = Pr(EHR stressor = 1 | validated stressor = 1) and
    FPR = Pr(EHR stressor = 1 | validated stressor = 0), among components
    present both before and after validation. Recovery counts components
    missing in the EHR that validation resolved.

    ``profiles`` is a mapping patient -> pair or an iterable of pairs. With a
    mapping, ``audited`` (patient -> components) restricts the missing counts
    to components that were actually put in front of the auditor.
    """
    if isinstance(profiles, Mapping):
        items = [(pid, pair) for pid, pair in profiles.items()]
    else:
        if audited is not None:
            raise ConfigurationError("audited components need profiles keyed by patient")
        items = [(None, pair) for pair in profiles]
    overall = Confusion()
    per = {c: Confusion() for c in COMPONENTS}
    rec = Counter()
    miss = Counter()
    for pid, (pre, post) in items:
        comps = COMPONENTS if audited is None else [c for c in COMPONENTS if c in audited.get(pid, ())]
        for comp in comps:
            a, b = pre.stressors[comp], post.stressors[comp]
            if a is None:
                miss[comp] += 1
                if b is not None:
                    rec[comp] += 1
            elif b is not None:
                overall.add(a, b)
                per[comp].add(a, b)
    return QualityReport(overall, per, sum(rec.values()), sum(miss.values()), dict(rec), dict(miss),
                         dict(finding_counts or {}))


def finding_counts(findings: pd.DataFrame) -> dict:
    return {f.value: int((findings["finding"] == f.value).sum()) for f in Finding}


def quality_report(findings: pd.DataFrame, sex_by_patient=None, table: ThresholdTable | None = None) -> QualityReport:
    if "finding" not in findings.columns:
        findings = classify_workbook(findings)
    profiles = validated_profiles(findings, sex_by_patient, table)
    return quality_from_profiles(profiles, finding_counts(findings), audited_components(findings))


def fleiss_kappa(ratings) -> float:
    """Fleiss' kappa for an items x raters matrix of category labels.

    Every cell must be rated. Returns 1.0 when every rater agrees on every
    item, including the degenerate case of a single category overall.
    """
    arr = np.asarray(ratings, dtype=object)
    if arr.ndim != 2:
        raise DataError("ratings must be a 2-d items x raters matrix")
    n_items, n_raters = arr.shape
    if n_items < 2 or n_raters < 2:
        raise DataError("Fleiss' kappa needs at least 2 items and 2 raters")
    if any(_is_blank(v) for v in arr.ravel()):
        raise DataError("every item must be rated by every rater")
    cats = sorted({str(v) for v in arr.ravel()})
    index = {c: j for j, c in enumerate(cats)}
    counts = np.zeros((n_items, len(cats)))
    for i in range(n_items):
        for v in arr[i]:
            counts[i, index[str(v)]] += 1
    m = n_raters
    p_item = ((counts * counts).sum(axis=1) - m) / (m * (m - 1))
    p_bar = p_item.mean()
    p_cat = counts.sum(axis=0) / (n_items * m)
    p_e = float((p_cat * p_cat).sum())
    if math.isclose(p_e, 1.0):
        return 1.0 if math.isclose(p_bar, 1.0) else float("nan")
    return float((p_bar - p_e) / (1 - p_e))
