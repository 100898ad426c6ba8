"""File formats: CSV readers/writers and 12-significant-digit JSON."""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from alistudy.ali import COMPONENTS
from alistudy.data import PhaseOneData, TwoPhaseDataset, age_to_z
from alistudy.errors import DataError

SIG_DIGITS = 12
FLOAT_FORMAT = f"%.{SIG_DIGITS}g"


def round_sig(x: float) -> float:
    if not math.isfinite(x) or x == 0:
        return x
    return float(f"{x:.{SIG_DIGITS}g}")


def to_jsonable(obj):
    """Plain-Python copy of ``obj`` with floats at 12 significant digits; NaN and inf become null."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return round_sig(x) if math.isfinite(x) else None
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def atomic_write_text(path, text: str):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(obj, path):
    atomic_write_text(path, json.dumps(to_jsonable(obj), indent=2, sort_keys=False, allow_nan=False) + "\n")


def dumps_json(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, allow_nan=False)


def write_csv(df: pd.DataFrame, path):
    atomic_write_text(path, df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))


def read_csv(path, **kw) -> pd.DataFrame:
    try:
        return pd.read_csv(path, **kw)
    except FileNotFoundError:
        raise DataError(f"input file not found: {path}") from None
    except pd.errors.EmptyDataError:
        return pd.DataFrame()


def _require(df: pd.DataFrame, cols, what: str):
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise DataError(f"{what} is missing columns {missing}")


def _lower_columns(df: pd.DataFrame) -> pd.DataFrame:
    return df.rename(columns=lambda c: str(c).strip().lower())


def read_extract(path) -> pd.DataFrame:
    """Wide EHR extract: patient_id, encounter_date, optional sex, component columns."""
    df = read_csv(path, dtype={"patient_id": str, "encounter_date": str, "sex": str})
    if df.empty and not len(df.columns):
        return pd.DataFrame(columns=["patient_id", "encounter_date"])
    _require(df, ["patient_id", "encounter_date"], "extract")
    for comp in COMPONENTS:
        if comp in df.columns:
            df[comp] = pd.to_numeric(df[comp], errors="raise")
    return df


def read_workbook(path) -> pd.DataFrame:
    df = read_csv(path, dtype={"patient_id": str, "encounter_date": str, "variable": str, "roadmap_hint": str,
                               "reviewed_value": str, "notes": str}, keep_default_na=False, na_values={"extracted_value": [""]})
    from alistudy.audit import WORKBOOK_COLUMNS

    _require(df, WORKBOOK_COLUMNS, "workbook")
    df["extracted_value"] = pd.to_numeric(df["extracted_value"], errors="raise")
    return df


def sex_by_patient(extract: pd.DataFrame) -> dict:
    if "sex" not in extract.columns:
        return {}
    out = {}
    for pid, sex in zip(extract["patient_id"], extract["sex"]):
        if isinstance(sex, str) and sex.strip():
            out.setdefault(pid, sex.strip().lower())
    return out


def read_phase_one(path) -> PhaseOneData:
    """Phase I CSV: patient_id, y, x_star (or ali) and covariates.

    Column names are case-insensitive. Covariates are the ``z`` column, or
    ``age_years``/``age`` (converted to decades past 18),
    or every column named ``z_*``.
    """
    df = _lower_columns(read_csv(path, dtype={"patient_id": str}))
    if "x_star" not in df.columns and "ali" in df.columns:
        df = df.rename(columns={"ali": "x_star"})
    _require(df, ["patient_id", "y", "x_star"], "phase-one data")
    zcols = [c for c in df.columns if c.startswith("z_")]
    if "z" in df.columns:
        z = df["z"].to_numpy(float)
    elif "age_years" in df.columns or "age" in df.columns:
        z = age_to_z(df["age_years" if "age_years" in df.columns else "age"].to_numpy(float))
    elif zcols:
        z = df[zcols].to_numpy(float)
    else:
        raise DataError("phase-one data needs a z, age or z_* column")
    return PhaseOneData(df["patient_id"].to_numpy(), df["y"].to_numpy(), df["x_star"].to_numpy(float), z)


def read_validated(path, phase_one: PhaseOneData) -> TwoPhaseDataset:
    """Validated ALI CSV: patient_id, x_validated (or ali)."""
    df = _lower_columns(read_csv(path, dtype={"patient_id": str}))
    if "x_validated" not in df.columns and "ali" in df.columns:
        df = df.rename(columns={"ali": "x_validated"})
    _require(df, ["patient_id", "x_validated"], "validated data")
    df = df.dropna(subset=["x_validated"])
    if df["patient_id"].duplicated().any():
        raise DataError("validated data lists a patient more than once")
    return TwoPhaseDataset.from_ids(phase_one, dict(zip(df["patient_id"], df["x_validated"].astype(float))))


def read_ids(path) -> list:
    df = read_csv(path, dtype={"patient_id": str})
    if df.empty:
        return []
    _require(df, ["patient_id"], "id list")
    return df["patient_id"].tolist()
