"""Early sepsis warning from hourly heart rate alone.

Modules: ``ingest`` (PSV records), ``windowing`` (12-hour windows, splits,
synthetic cohorts), ``nncore`` and ``models`` (numpy networks), ``boosting``
(histogram GBDT), ``gaopt`` (genetic width search), ``evaluation`` (metrics
and profiling) and ``cli``.
"""

__version__ = "0.1.0"
