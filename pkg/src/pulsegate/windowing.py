"""Turning patient stays into labeled 12-hour heart-rate windows.

Pipeline for one prediction horizon::

    records -> plausibility_filter -> cohort_filter -> extract_window
            -> missingness_gate -> impute_forward_fill      (preprocess)
    dataset -> split -> balance_dataset(train only)         (make_splits)
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import AllMissing, DataError, EmptyPartition, NoMinorityClass
from .ingest import (
    HR_MAX,
    HR_MIN,
    CohortCriteria,
    HourlyObservation,
    RawPatientRecord,
    cohort_filter,
    find_sepsis_onset,
    plausibility_filter,
)

WINDOW_HOURS = 12
MAX_MISSING = 4
HORIZONS = (1, 4)

SEPSIS = 1
NON_SEPSIS = 0

NOISE_SIGMA = 2.0
NOISE_BOUND = 4.0
NOISE_MAX_POINTS = 8


@dataclass(frozen=True)
class RawSlice:
    """Twelve consecutive hours cut from a stay, possibly with gaps (NaN)."""

    values: tuple
    label: int
    horizon_hours: int
    patient_id: str
    start_hour: int

    @property
    def n_missing(self):
        return sum(1 for v in self.values if v is None or math.isnan(v))


@dataclass(frozen=True)
class HeartRateWindow:
    values: tuple
    label: int
    horizon_hours: int
    patient_id: str
    augmented: bool = False

    def __post_init__(self):
        if len(self.values) != WINDOW_HOURS:
            raise DataError(f"window must have {WINDOW_HOURS} values, got {len(self.values)}")
        lo, hi = HR_MIN - NOISE_BOUND, HR_MAX + NOISE_BOUND
        for v in self.values:
            if not (lo <= v <= hi):
                raise DataError(f"window value {v!r} outside [{lo}, {hi}]")
        if self.horizon_hours not in HORIZONS:
            raise DataError(f"horizon must be one of {HORIZONS}")


@dataclass
class LabeledDataset:
    windows: list
    horizon_hours: int

    def __post_init__(self):
        for w in self.windows:
            if w.horizon_hours != self.horizon_hours:
                raise DataError("windows of mixed horizons in one dataset")

    def __len__(self):
        return len(self.windows)

    @property
    def X(self) -> np.ndarray:
        return np.array([w.values for w in self.windows], dtype=np.float64).reshape(-1, WINDOW_HOURS)

    @property
    def y(self) -> np.ndarray:
        return np.array([w.label for w in self.windows], dtype=np.int64)

    @property
    def n_sepsis(self):
        return sum(w.label == SEPSIS for w in self.windows)

    @property
    def prevalence(self):
        return self.n_sepsis / len(self.windows) if self.windows else 0.0

    @property
    def patient_ids(self):
        return sorted({w.patient_id for w in self.windows})


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if not all(0.0 < f < 1.0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must lie in (0,1) and sum to 1, got {fr}")


@dataclass(frozen=True)
class SyntheticCohortParams:
    n_patients: int = 1000
    sepsis_fraction: float = 0.1
    baseline_hr_mean: float = 75.0
    baseline_hr_sd: float = 10.0
    drift_per_hour: float = 2.0
    missing_rate: float = 0.05
    seed: int = 0
    min_stay_hours: int = 8
    max_stay_hours: int = 72
    min_onset_hour: int = 6
    age_range: tuple = (10.0, 90.0)

    def __post_init__(self):
        if self.n_patients < 1:
            raise DataError("n_patients must be >= 1")
        if self.baseline_hr_sd <= 0:
            raise DataError("baseline_hr_sd must be > 0")
        if not 0.0 <= self.sepsis_fraction < 1.0:
            raise DataError("sepsis_fraction must lie in [0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise DataError("missing_rate must lie in [0, 1)")
        if not 1 <= self.min_stay_hours <= self.max_stay_hours:
            raise DataError("need 1 <= min_stay_hours <= max_stay_hours")


@dataclass
class StageCounts:
    patients_parsed: int = 0
    cohort_kept: int = 0
    windows_extracted: int = 0
    windows_gated: int = 0
    windows_imputed: int = 0
    windows_balanced: Optional[int] = None

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items()}


# ---------------------------------------------------------------------------
# per-record steps


def extract_window(record: RawPatientRecord, horizon: int) -> Optional[RawSlice]:
    """Cut the 12-hour slice used for training.

    Non-sepsis stays give their final 12 hours. Sepsis stays give the 12 hours
    ending ``horizon`` hours before onset, i.e. ``onset-horizon-11 .. onset-horizon``;
    stays with fewer than ``horizon + 12`` pre-onset hours give None.
    """
    hr = [o.heart_rate for o in record.observations]
    onset = find_sepsis_onset(record)
    if onset is None:
        if len(hr) < WINDOW_HOURS:
            return None
        start = len(hr) - WINDOW_HOURS
        label = NON_SEPSIS
    else:
        if onset < horizon + WINDOW_HOURS:
            return None
        start = onset - horizon - (WINDOW_HOURS - 1)
        label = SEPSIS
    values = tuple(hr[start:start + WINDOW_HOURS])
    return RawSlice(values, label, horizon, record.patient_id, start)


def missingness_gate(raw: RawSlice) -> bool:
    """Keep the slice unless more than four of its hours are missing."""
    return raw.n_missing <= MAX_MISSING


def impute_forward_fill(raw: RawSlice) -> HeartRateWindow:
    values = [None if (v is None or math.isnan(v)) else float(v) for v in raw.values]
    present = [v for v in values if v is not None]
    if not present:
        raise AllMissing(f"slice of {raw.patient_id!r} has no present values")
    last = present[0]  # a missing prefix takes the first observed value
    filled = []
    for v in values:
        if v is not None:
            last = v
        filled.append(last)
    return HeartRateWindow(tuple(filled), raw.label, raw.horizon_hours, raw.patient_id, False)


def _truncated_normal(rng, size, sigma=NOISE_SIGMA, bound=NOISE_BOUND):
    out = rng.normal(0.0, sigma, size)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def augment_noise(window: HeartRateWindow, rng: np.random.Generator) -> HeartRateWindow:
    """Perturb 1-8 random hours by Gaussian noise (sd 2) truncated to +-4 bpm."""
    if window.augmented:
        raise DataError("augment_noise expects an original (non-augmented) window")
    k = int(rng.integers(1, NOISE_MAX_POINTS + 1))
    idx = rng.choice(WINDOW_HOURS, size=k, replace=False)
    values = np.array(window.values, dtype=np.float64)
    values[idx] += _truncated_normal(rng, k)
    return replace(window, values=tuple(float(v) for v in values), augmented=True)


# ---------------------------------------------------------------------------
# dataset-level steps


def preprocess(records, horizon: int, criteria: CohortCriteria = CohortCriteria()):
    """Run the per-record pipeline. Returns ``(LabeledDataset, StageCounts)``."""
    if horizon not in HORIZONS:
        raise DataError(f"horizon must be one of {HORIZONS}")
    counts = StageCounts()
    windows = []
    for rec in records:
        counts.patients_parsed += 1
        rec = plausibility_filter(rec)
        if not cohort_filter(rec, criteria):
            continue
        counts.cohort_kept += 1
        raw = extract_window(rec, horizon)
        if raw is None:
            continue
        counts.windows_extracted += 1
        if not missingness_gate(raw):
            continue
        counts.windows_gated += 1
        windows.append(impute_forward_fill(raw))
        counts.windows_imputed += 1
    return LabeledDataset(windows, horizon), counts


def balance_dataset(ds: LabeledDataset, rng: np.random.Generator, target_prevalence: float = 0.30) -> LabeledDataset:
    """Append noisy copies of sepsis windows until the sepsis share reaches the target."""
    originals = [w for w in ds.windows if w.label == SEPSIS and not w.augmented]
    n_neg = sum(w.label == NON_SEPSIS for w in ds.windows)
    if not originals or n_neg == 0:
        raise NoMinorityClass("need at least one sepsis and one non-sepsis window")
    n_pos = ds.n_sepsis
    added = []
    while n_pos / (n_pos + n_neg) < target_prevalence:
        src = originals[int(rng.integers(len(originals)))]
        added.append(augment_noise(src, rng))
        n_pos += 1
    return LabeledDataset(list(ds.windows) + added, ds.horizon_hours)


def split(ds: LabeledDataset, spec: SplitSpec):
    """Patient-level stratified split into ``(train, val, test)``.

    Every patient is assigned a position in (0, 1) that is evenly spaced within
    its stratum (sepsis / non-sepsis) after a seeded shuffle; patients are then
    cut into partitions by position, so each partition receives close to its
    fraction of both strata and the totals are exact.
    """
    if not ds.windows:
        raise EmptyPartition("cannot split an empty dataset")
    label_of = {}
    for w in ds.windows:
        label_of[w.patient_id] = max(label_of.get(w.patient_id, 0), w.label)
    patients = sorted(label_of)
    n = len(patients)
    n_train = round(spec.train_fraction * n)
    n_val = round(spec.val_fraction * n)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise EmptyPartition(f"{n} patients cannot fill split {spec}")

    rng = np.random.default_rng(spec.seed)
    position = {}
    for stratum in (SEPSIS, NON_SEPSIS):
        members = [p for p in patients if label_of[p] == stratum]
        order = rng.permutation(len(members))
        for rank, i in enumerate(order):
            position[members[i]] = (rank + 0.5) / len(members)
    tiebreak = rng.permutation(n)
    keys = np.array([position[p] for p in patients])
    ordered = [patients[i] for i in np.lexsort((tiebreak, keys))]
    part_of = {}
    for i, p in enumerate(ordered):
        part_of[p] = 0 if i < n_train else (1 if i < n_train + n_val else 2)
    parts = ([], [], [])
    for w in ds.windows:
        parts[part_of[w.patient_id]].append(w)
    return tuple(LabeledDataset(list(p), ds.horizon_hours) for p in parts)


def make_splits(ds: LabeledDataset, spec: SplitSpec, target_prevalence: float = 0.30, counts: Optional[StageCounts] = None):
    """Split, then balance the training partition only."""
    train, val, test = split(ds, spec)
    rng = np.random.default_rng([spec.seed, 0xA06])
    train = balance_dataset(train, rng, target_prevalence)
    if counts is not None:
        counts.windows_balanced = len(train) + len(val) + len(test)
    return train, val, test


# ---------------------------------------------------------------------------
# synthetic cohort


def synthesize_cohort(params: SyntheticCohortParams) -> list:
    """Seeded stand-in for the ICU cohort.

    Heart rates are i.i.d. Normal(mean, sd) clipped to [15, 300]. Sepsis stays add
    a ramp of ``drift_per_hour * j`` over the 12 hours before onset (j = 0..11)
    and hold ``12 * drift_per_hour`` from onset on.
    """
    rng = np.random.default_rng(params.seed)
    n = params.n_patients
    n_sepsis = int(round(n * params.sepsis_fraction))
    is_sepsis = np.zeros(n, dtype=bool)
    is_sepsis[rng.choice(n, size=n_sepsis, replace=False)] = True
    records = []
    for i in range(n):
        age = float(np.round(rng.uniform(*params.age_range), 1))
        if is_sepsis[i]:
            lo = max(params.min_stay_hours, params.min_onset_hour + 1)
            stay = int(rng.integers(lo, max(lo, params.max_stay_hours) + 1))
            onset = int(rng.integers(params.min_onset_hour, stay))
        else:
            stay = int(rng.integers(params.min_stay_hours, params.max_stay_hours + 1))
            onset = None
        hr = rng.normal(params.baseline_hr_mean, params.baseline_hr_sd, stay)
        if onset is not None:
            t = np.arange(stay)
            ramp = np.clip(t - (onset - WINDOW_HOURS), 0, WINDOW_HOURS)
            hr = hr + params.drift_per_hour * ramp
        hr = np.clip(hr, HR_MIN, HR_MAX)
        missing = rng.random(stay) < params.missing_rate
        obs = tuple(
            HourlyObservation(
                h,
                None if missing[h] else float(hr[h]),
                int(onset is not None and h >= onset),
            )
            for h in range(stay)
        )
        records.append(RawPatientRecord(f"s{i:05d}", age, obs, "synthetic"))
    return records


# ---------------------------------------------------------------------------
# CSV serialization

CSV_COLUMNS = ["patient_id", "horizon_hours", "label", "augmented"] + [f"hr_{i:02d}" for i in range(WINDOW_HOURS)]


def dataset_to_csv(ds: LabeledDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for w in ds.windows:
        writer.writerow(
            [w.patient_id, w.horizon_hours, w.label, int(w.augmented)] + [repr(float(v)) for v in w.values]
        )
    return buf.getvalue()


def dataset_from_csv(text: str, horizon_hours: Optional[int] = None) -> LabeledDataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_COLUMNS:
        raise DataError(f"unexpected dataset header {header!r}")
    windows = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(CSV_COLUMNS):
            raise DataError(f"dataset row has {len(row)} fields")
        try:
            windows.append(
                HeartRateWindow(
                    tuple(float(v) for v in row[4:]),
                    int(row[2]),
                    int(row[1]),
                    row[0],
                    bool(int(row[3])),
                )
            )
        except ValueError as exc:
            raise DataError(f"bad dataset row: {exc}") from None
    if horizon_hours is None:
        if not windows:
            raise DataError("empty dataset file and no horizon given")
        horizon_hours = windows[0].horizon_hours
    return LabeledDataset(windows, horizon_hours)


def write_dataset(ds: LabeledDataset, path):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(dataset_to_csv(ds), encoding="utf-8")
    os.replace(tmp, path)


def read_dataset(path) -> LabeledDataset:
    return dataset_from_csv(Path(path).read_text(encoding="utf-8"))
