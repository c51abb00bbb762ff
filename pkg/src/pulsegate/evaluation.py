"""Scoring, profiling and report emission.

Classification rule everywhere: ``score >= threshold`` means sepsis.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NoPositives, SingleClass


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    sensitivity: float
    specificity: float
    accuracy: float


@dataclass(frozen=True)
class ResourceProfile:
    size_bytes: int
    mean_latency: float  # milliseconds per prediction
    latency_samples: int
    warmup_discarded: int


def _scored(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    if s.shape != y.shape or s.size == 0:
        raise DataError("scores and labels must be non-empty and equally long")
    return s, y


def _threshold_table(s, y):
    """Distinct thresholds (descending) with cumulative TP/FP counts at each."""
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last_of_block = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    tp = np.cumsum(y_sorted)[last_of_block]
    fp = (last_of_block + 1) - tp
    return s_sorted[last_of_block], tp, fp


def roc_auc(scores, labels):
    """ROC curve points and trapezoidal area.

    Returns ``((thresholds, fpr, tpr), auc)``; the curve starts at (0, 0) with
    threshold +inf. Tied scores form one step, so the area equals the
    Mann-Whitney statistic with ties counted one half.
    """
    s, y = _scored(scores, labels)
    P, N = int(y.sum()), int(len(y) - y.sum())
    if P == 0 or N == 0:
        raise SingleClass("ROC needs both classes")
    thr, tp, fp = _threshold_table(s, y)
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    thresholds = np.r_[np.inf, thr]
    # integer trapezoid then one division keeps the area exact
    area = float(np.sum(np.diff(np.r_[0, fp]) * (np.r_[0, tp][:-1] + tp)) / (2.0 * P * N))
    return (thresholds, fpr, tpr), area


def pr_ap(scores, labels):
    """Precision-recall points and step-wise average precision.

    Returns ``((thresholds, recall, precision), ap)`` with
    ``ap = sum((R_n - R_{n-1}) * P_n)`` over descending distinct thresholds.
    """
    s, y = _scored(scores, labels)
    P = int(y.sum())
    if P == 0:
        raise NoPositives("average precision needs at least one positive")
    thr, tp, fp = _threshold_table(s, y)
    recall = tp / P
    precision = tp / (tp + fp)
    ap = float(np.sum(np.diff(np.r_[0, tp]) * precision) / P)
    return (thr, recall, precision), ap


def confusion_at(scores, labels, threshold):
    s, y = _scored(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return tp, fp, tn, fn


def operating_point(scores, labels, threshold) -> OperatingPoint:
    tp, fp, tn, fn = confusion_at(scores, labels, threshold)
    sens = tp / (tp + fn) if tp + fn else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    acc = (tp + tn) / (tp + fp + tn + fn)
    return OperatingPoint(float(threshold), sens, spec, acc)


def threshold_at_sensitivity(scores, labels, target=0.85) -> OperatingPoint:
    """Largest distinct score whose sensitivity reaches ``target``."""
    s, y = _scored(scores, labels)
    P, N = int(y.sum()), int(len(y) - y.sum())
    if P == 0 or N == 0:
        raise SingleClass("operating point needs both classes")
    thr, tp, _ = _threshold_table(s, y)
    ok = np.nonzero(tp / P >= target)[0]
    # thresholds descend, so the first hit is the largest
    return operating_point(s, y, thr[ok[0]])


def calibration_table(scores, labels, bins=10):
    """Equal-width reliability table on [0, 1]; the last bin is closed on the right.

    Empty bins carry ``count == 0`` and NaN means.
    """
    s, y = _scored(scores, labels)
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, bins - 1)
    rows = []
    for b in range(bins):
        m = which == b
        n = int(m.sum())
        rows.append({
            "bin_lo": float(edges[b]),
            "bin_hi": float(edges[b + 1]),
            "mean_pred": float(s[m].mean()) if n else float("nan"),
            "obs_freq": float(y[m].mean()) if n else float("nan"),
            "count": n,
        })
    return rows


# ---------------------------------------------------------------------------
# resources


def _single_predictor(model):
    from . import boosting, models

    if getattr(model, "family", None) == "gbdt":
        return lambda w: boosting.predict_proba(model, w)
    return lambda w: models.predict_proba(model, w)


def measure_latency(model, windows, repeats=30, warmup=5, predictor=None):
    """Per-prediction latency in milliseconds.

    Each pass predicts every window one at a time; the reported value is the
    median over ``repeats`` timed passes of ``pass_time / n_windows``.
    Returns ``(median_ms, repeats, warmup)``.
    """
    X = np.asarray([getattr(w, "values", w) for w in windows], dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise DataError("measure_latency needs at least one window")
    if repeats < 1:
        raise DataError("repeats must be >= 1")
    predict = predictor or _single_predictor(model)
    rows = [X[i:i + 1] for i in range(len(X))]
    for _ in range(warmup):
        for r in rows:
            predict(r)
    per_pass = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        for r in rows:
            predict(r)
        per_pass.append((time.perf_counter_ns() - t0) / len(rows))
    return float(np.median(per_pass)) / 1e6, repeats, warmup


def measure_size(model_file_bytes) -> int:
    return len(model_file_bytes)


def profile(model, model_bytes, windows, repeats=30, warmup=5) -> ResourceProfile:
    latency, n, w = measure_latency(model, windows, repeats, warmup)
    return ResourceProfile(measure_size(model_bytes), latency, n, w)


# ---------------------------------------------------------------------------
# bundles and reports


def evaluate_scores(scores, labels, target_sensitivity=0.85):
    """All curve data and scalar metrics for one scored set."""
    roc_curve, auroc = roc_auc(scores, labels)
    pr_curve, ap = pr_ap(scores, labels)
    op = threshold_at_sensitivity(scores, labels, target_sensitivity)
    return {
        "auroc": auroc,
        "aupr": ap,
        "operating_point": op,
        "roc": roc_curve,
        "pr": pr_curve,
        "calibration": calibration_table(scores, labels),
        "n": int(len(np.ravel(scores))),
        "prevalence": float(np.mean(labels)),
    }


def metrics_dict(bundle, resources: ResourceProfile = None, extra=None):
    op = bundle["operating_point"]
    out = {
        "auroc": bundle["auroc"],
        "aupr": bundle["aupr"],
        "sensitivity": op.sensitivity,
        "specificity": op.specificity,
        "accuracy": op.accuracy,
        "threshold": op.threshold,
        "size_kb": None if resources is None else resources.size_bytes / 1024.0,
        "execution_time_ms": None if resources is None else resources.mean_latency,
        "n_windows": bundle["n"],
        "prevalence": bundle["prevalence"],
    }
    if resources is not None:
        out["size_bytes"] = resources.size_bytes
        out["latency_samples"] = resources.latency_samples
        out["warmup_discarded"] = resources.warmup_discarded
    if extra:
        out.update(extra)
    return out


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _svg(bundle):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "pulsegate"
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    _, fpr, tpr = bundle["roc"]
    axes[0].plot(fpr, tpr, drawstyle="default")
    axes[0].plot([0, 1], [0, 1], ls=":", c="grey")
    axes[0].set(title=f"ROC (AUROC {bundle['auroc']:.3f})", xlabel="1 - specificity", ylabel="sensitivity")
    _, rec, prec = bundle["pr"]
    axes[1].step(np.r_[0, rec], np.r_[prec[0], prec], where="pre")
    axes[1].set(title=f"PR (AP {bundle['aupr']:.3f})", xlabel="recall", ylabel="precision", ylim=(0, 1.02))
    cal = [r for r in bundle["calibration"] if r["count"]]
    axes[2].plot([r["mean_pred"] for r in cal], [r["obs_freq"] for r in cal], marker="o")
    axes[2].plot([0, 1], [0, 1], ls=":", c="grey")
    axes[2].set(title="Calibration", xlabel="mean predicted risk", ylabel="observed frequency")
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def emit_report(bundle, out_dir, resources: ResourceProfile = None, extra=None):
    """Write metrics.json, roc.csv, pr.csv, calibration.csv and curves.svg."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = metrics_dict(bundle, resources, extra)
    thr, fpr, tpr = bundle["roc"]
    pthr, rec, prec = bundle["pr"]
    files = {
        "metrics.json": json.dumps(metrics, indent=2, allow_nan=True) + "\n",
        "roc.csv": _csv(["threshold", "fpr", "tpr"], zip(thr, fpr, tpr)),
        "pr.csv": _csv(["threshold", "recall", "precision"], zip(pthr, rec, prec)),
        "calibration.csv": _csv(
            ["bin_lo", "bin_hi", "mean_pred", "obs_freq", "count"],
            ([r["bin_lo"], r["bin_hi"], r["mean_pred"], r["obs_freq"], r["count"]] for r in bundle["calibration"]),
        ),
        "curves.svg": _svg(bundle),
    }
    for name, text in files.items():
        _atomic_write(out / name, text)
    return [out / n for n in files]


def profile_dict(p: ResourceProfile):
    return asdict(p)
