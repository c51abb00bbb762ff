"""Reading PhysioNet-2019 style patient files.

Each ``.psv`` file holds one ICU stay: a header row of pipe-separated column
names followed by one row per hour. Only ``HR``, ``Age`` and ``SepsisLabel``
are retained; every other column is skipped by name.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, MalformedRow, MissingColumn, NonMonotoneSepsisLabel

HR_MIN = 15.0
HR_MAX = 300.0
REQUIRED_COLUMNS = ("HR", "Age", "SepsisLabel")


@dataclass(frozen=True)
class HourlyObservation:
    hour_index: int
    heart_rate: Optional[float]
    sepsis_label: int


@dataclass(frozen=True)
class RawPatientRecord:
    patient_id: str
    age: float
    observations: tuple
    source: str = "real_psv"

    def __post_init__(self):
        if not self.observations:
            raise DataError(f"record {self.patient_id!r} has no observations")

    def __len__(self):
        return len(self.observations)

    @property
    def heart_rates(self) -> np.ndarray:
        """Heart rates as float64 with NaN marking missing hours."""
        return np.array(
            [np.nan if o.heart_rate is None else o.heart_rate for o in self.observations],
            dtype=np.float64,
        )

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.sepsis_label for o in self.observations], dtype=np.int8)


@dataclass(frozen=True)
class CohortCriteria:
    min_age_exclusive: float = 14.0
    min_stay_hours_exclusive: int = 12

    def __post_init__(self):
        if not (self.min_age_exclusive > 0 and self.min_stay_hours_exclusive > 0):
            raise DataError("cohort criteria must be strictly positive")


def _parse_number(token, line_no, column):
    if token == "NaN":
        return None
    try:
        value = float(token)
    except ValueError:
        raise MalformedRow(line_no, f"{column}={token!r} is not a number") from None
    if not math.isfinite(value):
        raise MalformedRow(line_no, f"{column}={token!r} is not finite")
    return value


def parse_psv(text: str, patient_id: str = "", source: str = "real_psv") -> RawPatientRecord:
    """Parse one patient file.

    Raises MissingColumn when a required column is absent, MalformedRow for a
    row that cannot be read (wrong arity, bad number, age that disagrees with
    the first row, label outside {0, 1}) and NonMonotoneSepsisLabel when the
    label drops back to 0 after having been 1.
    """
    lines = text.splitlines()
    if not lines:
        raise MissingColumn(REQUIRED_COLUMNS[0])
    header = [h.strip() for h in lines[0].split("|")]
    for name in REQUIRED_COLUMNS:
        if name not in header:
            raise MissingColumn(name)
    i_hr, i_age, i_lab = (header.index(n) for n in REQUIRED_COLUMNS)

    observations = []
    age = None
    seen_positive = False
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tokens = [t.strip() for t in line.split("|")]
        if len(tokens) != len(header):
            raise MalformedRow(line_no, f"expected {len(header)} fields, got {len(tokens)}")
        hr = _parse_number(tokens[i_hr], line_no, "HR")
        row_age = _parse_number(tokens[i_age], line_no, "Age")
        label = _parse_number(tokens[i_lab], line_no, "SepsisLabel")
        if row_age is None:
            raise MalformedRow(line_no, "Age is missing")
        if age is None:
            age = row_age
        elif row_age != age:
            raise MalformedRow(line_no, f"Age {row_age} disagrees with first row ({age})")
        if label not in (0.0, 1.0):
            raise MalformedRow(line_no, f"SepsisLabel={tokens[i_lab]!r}")
        label = int(label)
        if label == 1:
            seen_positive = True
        elif seen_positive:
            raise NonMonotoneSepsisLabel(f"label returns to 0 at line {line_no}")
        observations.append(HourlyObservation(len(observations), hr, label))

    if not observations:
        raise MalformedRow(2, "file has no data rows")
    return RawPatientRecord(patient_id, age, tuple(observations), source)


def _fmt(value):
    return "NaN" if value is None else repr(float(value))


def to_psv(record: RawPatientRecord) -> str:
    """Serialize the retained columns; ``parse_psv`` reads the result back exactly."""
    rows = ["HR|Age|SepsisLabel"]
    for obs in record.observations:
        rows.append(f"{_fmt(obs.heart_rate)}|{_fmt(record.age)}|{obs.sepsis_label}")
    return "\n".join(rows) + "\n"


def read_psv(path) -> RawPatientRecord:
    path = Path(path)
    return parse_psv(path.read_text(encoding="utf-8"), patient_id=path.stem)


def read_psv_dir(directory) -> list:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix == ".psv")
    if not files:
        raise DataError(f"no .psv files in {directory}")
    return [read_psv(p) for p in files]


def write_psv_dir(records, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        tmp = directory / f".{rec.patient_id}.psv.tmp"
        tmp.write_text(to_psv(rec), encoding="utf-8")
        os.replace(tmp, directory / f"{rec.patient_id}.psv")
        paths.append(directory / f"{rec.patient_id}.psv")
    return paths


def plausibility_filter(record: RawPatientRecord) -> RawPatientRecord:
    """Blank out heart rates below 15 or above 300 bpm (bounds themselves are kept)."""
    obs = tuple(
        replace(o, heart_rate=None)
        if o.heart_rate is not None and (o.heart_rate < HR_MIN or o.heart_rate > HR_MAX)
        else o
        for o in record.observations
    )
    return replace(record, observations=obs)


def cohort_filter(record: RawPatientRecord, criteria: CohortCriteria = CohortCriteria()) -> bool:
    # each row is one hour, so the stay length is the row count
    return record.age > criteria.min_age_exclusive and len(record) > criteria.min_stay_hours_exclusive


def find_sepsis_onset(record: RawPatientRecord) -> Optional[int]:
    for obs in record.observations:
        if obs.sepsis_label == 1:
            return obs.hour_index
    return None
