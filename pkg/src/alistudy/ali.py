"""Allostatic load index: component thresholds, stressors and roadmap recovery.

Each of the ten components is discretized into a binary stressor at a clinical
threshold. The index is the proportion of *non-missing* stressors equal to one,
so a patient with missing labs is not silently scored as healthy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional

import yaml

from alistudy.errors import ConfigurationError, DataError

COMPONENTS = (
    "systolic_bp",
    "diastolic_bp",
    "bmi",
    "triglycerides",
    "total_cholesterol",
    "crp",
    "hba1c",
    "serum_albumin",
    "creatinine_clearance",
    "homocysteine",
)

SYSTEMS = {
    "systolic_bp": "cardiovascular",
    "diastolic_bp": "cardiovascular",
    "bmi": "metabolic",
    "triglycerides": "metabolic",
    "total_cholesterol": "metabolic",
    "crp": "inflammation",
    "hba1c": "inflammation",
    "serum_albumin": "inflammation",
    "creatinine_clearance": "inflammation",
    "homocysteine": "inflammation",
}

SEXES = ("male", "female")


@dataclass(frozen=True)
class Threshold:
    """Cutoff rule for one component.

    ``direction`` is ``"above"`` (stressor when value exceeds the cutoff) or
    ``"below"``. ``inclusive`` says whether the cutoff itself is a stressor.
    ``cutoff_female`` is only used for sex-specific components.
    """

    label: str
    cutoff: float
    direction: str
    inclusive: bool
    aux_terms: tuple[str, ...] = ()
    cutoff_female: Optional[float] = None

    def __post_init__(self):
        if self.direction not in ("above", "below"):
            raise ConfigurationError(f"{self.label}: direction must be 'above' or 'below'")
        for c in (self.cutoff, self.cutoff_female):
            if c is not None and not math.isfinite(c):
                raise ConfigurationError(f"{self.label}: cutoff must be finite")

    @property
    def sex_specific(self) -> bool:
        return self.cutoff_female is not None

    def cutoff_for(self, sex: Optional[str]) -> float:
        if not self.sex_specific:
            return self.cutoff
        if sex not in SEXES:
            raise DataError(f"{self.label} threshold is sex-specific; got sex={sex!r}")
        return self.cutoff_female if sex == "female" else self.cutoff

    def is_stressor(self, value: float, sex: Optional[str] = None) -> int:
        cut = self.cutoff_for(sex)
        if self.direction == "above":
            hit = value >= cut if self.inclusive else value > cut
        else:
            hit = value <= cut if self.inclusive else value < cut
        return int(hit)


def _default_thresholds() -> dict[str, Threshold]:
    return {
        "systolic_bp": Threshold("Systolic Blood Pressure", 140, "above", False, ("Hypertension",)),
        "diastolic_bp": Threshold("Diastolic Blood Pressure", 90, "above", False, ("Hypertension",)),
        "bmi": Threshold(
            "Body Mass Index", 30, "above", False,
            ("Obesity", "Morbid Obesity", "Grade I, II or III Obesity"),
        ),
        "triglycerides": Threshold("Triglycerides", 150, "above", True, ("Hypertriglyceridemia",)),
        "total_cholesterol": Threshold("Total Cholesterol", 200, "above", True, ("Hypercholesterolemia",)),
        "crp": Threshold(
            "C-Reactive Protein", 10, "above", True,
            ("Sepsis", "Infection", "Auto-Immune Inflammatory Syndrome"),
        ),
        "hba1c": Threshold("Hemoglobin A1C", 6.5, "above", True, ("Diabetes", "Impaired Glycemic Control")),
        # verbatim from the roadmap table; flip ``direction`` via config if needed
        "serum_albumin": Threshold("Serum Albumin", 3.5, "above", True, ()),
        "creatinine_clearance": Threshold(
            "Creatinine Clearance", 110, "below", False,
            ("Renal Failure", "Insufficiency", "Acute Kidney Injury", "Chronic Renal Failure"),
            cutoff_female=100,
        ),
        "homocysteine": Threshold("Homocysteine", 50, "above", False, ("Hyperhomocysteinemia", "Vitamin deficiency")),
    }


@dataclass(frozen=True)
class ThresholdTable:
    rules: Mapping[str, Threshold] = field(default_factory=_default_thresholds)

    def __post_init__(self):
        unknown = set(self.rules) - set(COMPONENTS)
        missing = set(COMPONENTS) - set(self.rules)
        if unknown or missing:
            raise ConfigurationError(
                f"threshold table must cover exactly the 10 components; "
                f"unknown={sorted(unknown)} missing={sorted(missing)}"
            )

    def __getitem__(self, component: str) -> Threshold:
        try:
            return self.rules[component]
        except KeyError:
            raise ConfigurationError(f"unknown ALI component {component!r}") from None

    def aux_terms(self, component: str) -> tuple[str, ...]:
        return self[component].aux_terms

    @classmethod
    def default(cls) -> "ThresholdTable":
        return cls()

    @classmethod
    def from_config(cls, config: Mapping) -> "ThresholdTable":
        """Override default rules per component from a mapping.

        Accepted keys per component: ``cutoff``, ``cutoff_female``, ``direction``,
        ``inclusive``, ``aux_terms``, ``label``.
        """
        rules = dict(_default_thresholds())
        allowed = {"cutoff", "cutoff_female", "direction", "inclusive", "aux_terms", "label"}
        for comp, override in (config or {}).items():
            if comp not in rules:
                raise ConfigurationError(f"unknown ALI component {comp!r} in threshold config")
            bad = set(override) - allowed
            if bad:
                raise ConfigurationError(f"{comp}: unknown threshold keys {sorted(bad)}")
            kw = dict(override)
            if "aux_terms" in kw:
                kw["aux_terms"] = tuple(kw["aux_terms"] or ())
            for key in ("cutoff", "cutoff_female"):
                if kw.get(key) is not None:
                    kw[key] = float(kw[key])
            rules[comp] = replace(rules[comp], **kw)
        return cls(rules)

    @classmethod
    def load(cls, path) -> "ThresholdTable":
        with open(Path(path)) as fh:
            config = yaml.safe_load(fh) or {}
        if not isinstance(config, dict):
            raise ConfigurationError(f"{path}: threshold config must be a mapping")
        return cls.from_config(config.get("thresholds", config))


@dataclass(frozen=True)
class ComponentMeasurement:
    component: str
    value: Optional[float]
    patient_sex: Optional[str] = None

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise ConfigurationError(f"unknown ALI component {self.component!r}")
        if self.value is not None and not math.isfinite(self.value):
            raise DataError(f"{self.component}: measurement must be finite, got {self.value}")


@dataclass(frozen=True)
class StressorProfile:
    """Per-component stressor (0, 1 or ``None`` for missing) plus recovery flags."""

    stressors: Mapping[str, Optional[int]]
    recovered: Mapping[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.stressors) != set(COMPONENTS):
            raise DataError("a stressor profile needs exactly one entry per ALI component")
        for comp, s in self.stressors.items():
            if s not in (0, 1, None):
                raise DataError(f"{comp}: stressor must be 0, 1 or missing, got {s!r}")
        rec = {c: bool(self.recovered.get(c, False)) for c in COMPONENTS}
        object.__setattr__(self, "recovered", rec)

    @classmethod
    def from_values(cls, values: Mapping[str, Optional[int]]) -> "StressorProfile":
        return cls({c: values.get(c) for c in COMPONENTS})

    def n_missing(self) -> int:
        return sum(s is None for s in self.stressors.values())


@dataclass(frozen=True)
class AliValue:
    value: Optional[float]
    numerator: int
    denominator: int


def classify_component(m: ComponentMeasurement, table: ThresholdTable | None = None) -> Optional[int]:
    """Stressor for a single measurement: 1, 0, or ``None`` when the value is absent."""
    table = table or ThresholdTable.default()
    rule = table[m.component]
    if m.value is None:
        return None
    return rule.is_stressor(m.value, m.patient_sex)


def compute_ali(profile: StressorProfile) -> AliValue:
    present = [s for s in profile.stressors.values() if s is not None]
    num, den = sum(present), len(present)
    return AliValue(num / den if den else None, num, den)


def _normalize_terms(terms: Iterable[str]) -> list[str]:
    return [" ".join(str(t).lower().split()) for t in terms if t is not None and str(t).strip()]


def apply_roadmap(profile: StressorProfile, chart_terms: Iterable[str], table: ThresholdTable | None = None) -> StressorProfile:
    """Recover missing stressors as 1 when an auxiliary diagnosis is in the chart.

    Matching is case-insensitive substring matching of each roadmap term
    against each chart diagnosis. Non-missing stressors are never touched.
    """
    table = table or ThresholdTable.default()
    chart = _normalize_terms(chart_terms)
    stressors = dict(profile.stressors)
    recovered = dict(profile.recovered)
    for comp in COMPONENTS:
        if stressors[comp] is not None:
            continue
        terms = _normalize_terms(table.aux_terms(comp))
        if any(term in diag for term in terms for diag in chart):
            stressors[comp] = 1
            recovered[comp] = True
    return StressorProfile(stressors, recovered)


def profile_from_measurements(
    values: Mapping[str, Iterable[Optional[float]]],
    sex: Optional[str],
    table: ThresholdTable | None = None,
) -> StressorProfile:
    """Stressor profile from per-component encounter measurements.

    Encounter values are averaged (absent values skipped) before thresholding.
    Components not present in ``values`` are missing.
    """
    table = table or ThresholdTable.default()
    out = {}
    for comp in COMPONENTS:
        vals = [float(v) for v in values.get(comp, ()) if v is not None and not _isnan(v)]
        mean = math.fsum(vals) / len(vals) if vals else None
        out[comp] = classify_component(ComponentMeasurement(comp, mean, sex), table)
    return StressorProfile(out)


def _isnan(v) -> bool:
    try:
        return math.isnan(v)
    except TypeError:
        return False
