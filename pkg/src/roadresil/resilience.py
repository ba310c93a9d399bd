"""Baseline profiles, relative speed change and the three resilience metrics.

Time is measured in integer hours throughout. A detected window ``(a, b)`` is
half open: ``a`` is the first sub-threshold hour and ``b`` the first hour after
the run, so a single affected hour has duration 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from roadresil import kernels
from roadresil.core import (
    HOURS_PER_WEEK,
    BaselineProfile,
    ResilienceMetrics,
    SpeedSeries,
    ValidationError,
    hour_of_day,
    hour_of_week,
)

logger = logging.getLogger(__name__)

MIN_CELL_OBS = 3
MIN_ELIGIBLE = 24
SEARCH_PAD_HOURS = 48


@dataclass(frozen=True)
class EventWindowConfig:
    event_span: tuple[int, int]
    threshold: float = -1.0
    gap_tolerance: int = 2
    baseline_lookback: int = 30  # days

    def __post_init__(self):
        if not self.threshold < 0:
            raise ValidationError(f"threshold must be negative, got {self.threshold}")
        if self.gap_tolerance < 0:
            raise ValidationError("gap_tolerance must be >= 0")
        if not self.baseline_lookback > 0:
            raise ValidationError("baseline_lookback must be > 0")
        if self.event_span[1] < self.event_span[0]:
            raise ValidationError("event span ends before it starts")

    @property
    def search_span(self) -> tuple[int, int]:
        return self.event_span[0] - SEARCH_PAD_HOURS, self.event_span[1] + SEARCH_PAD_HOURS


@dataclass(frozen=True)
class ChangeSeries:
    """Relative change ``f`` in percent at hours with both observed and
    baseline speed."""

    link_id: str
    hours: np.ndarray
    values: np.ndarray
    coverage: float

    def between(self, lo: int, hi: int) -> "ChangeSeries":
        """Samples with ``lo <= hour <= hi``; coverage recomputed over the span."""
        m = (self.hours >= lo) & (self.hours <= hi)
        span = hi - lo + 1
        return ChangeSeries(self.link_id, self.hours[m], self.values[m], float(m.sum()) / span if span > 0 else 0.0)


def build_baseline(
    series: SpeedSeries,
    event_span: tuple[int, int],
    lookback_days: int = 30,
    exclude_spans: Sequence[tuple[int, int]] = (),
) -> BaselineProfile:
    """Hour-of-week speed profile from the ``lookback_days`` before the event.

    Samples inside any span of ``exclude_spans`` (inclusive) are ineligible.
    Cells with fewer than three observations defer to the hour-of-day mean;
    fewer than 24 eligible samples overall marks the profile insufficient.
    """
    if len(series) == 0:
        raise ValidationError(f"series {series.link_id} is empty")
    start = event_span[0]
    h = series.hours
    eligible = (h >= start - 24 * lookback_days) & (h < start)
    for lo, hi in list(exclude_spans) + [tuple(event_span)]:
        eligible &= ~((h >= lo) & (h <= hi))
    hs = h[eligible]
    ss = series.speeds[eligible]
    how_sum, how_n = kernels.bin_sums(hour_of_week(hs), ss, HOURS_PER_WEEK)
    hod_sum, hod_n = kernels.bin_sums(hour_of_day(hs), ss, 24)
    with np.errstate(invalid="ignore", divide="ignore"):
        how_mean = np.where(how_n > 0, how_sum / np.maximum(how_n, 1), np.nan)
        hod_mean = np.where(hod_n > 0, hod_sum / np.maximum(hod_n, 1), np.nan)
    n = int(hs.size)
    return BaselineProfile(
        link_id=series.link_id,
        how_mean=how_mean,
        how_n=how_n,
        hod_mean=hod_mean,
        hod_n=hod_n,
        n_eligible=n,
        min_cell_obs=MIN_CELL_OBS,
        insufficient=n < MIN_ELIGIBLE,
    )


def relative_change(series: SpeedSeries, baseline: BaselineProfile) -> ChangeSeries:
    """``f = 100 (s - s_bar) / s_bar`` wherever both speeds exist."""
    if baseline.insufficient:
        raise ValidationError(f"link {series.link_id}: baseline insufficient")
    expected = baseline.expected(series.hours)
    ok = np.isfinite(expected)
    hours = series.hours[ok]
    f = 100.0 * (series.speeds[ok] - expected[ok]) / expected[ok]
    span = int(series.hours[-1] - series.hours[0] + 1) if len(series) else 0
    coverage = hours.size / span if span else 0.0
    return ChangeSeries(series.link_id, hours, f, coverage)


def detect_window(change: ChangeSeries, cfg: EventWindowConfig) -> tuple[Optional[tuple[int, int]], bool]:
    """Affected window ``(a, b)`` and a low-coverage flag.

    Sub-threshold runs inside the padded search span are merged when at most
    ``gap_tolerance`` hours separate them. The merged run overlapping the
    event span the most is chosen, then the longest, then the earliest.
    """
    lo, hi = cfg.search_span
    sub = change.between(lo, hi)
    low_coverage = sub.coverage < 0.5
    starts, ends = kernels.runs_below(sub.hours, sub.values, cfg.threshold)
    if starts.size == 0:
        return None, low_coverage

    merged = [[int(starts[0]), int(ends[0])]]
    for s, e in zip(starts[1:], ends[1:]):
        if s - merged[-1][1] - 1 <= cfg.gap_tolerance:
            merged[-1][1] = int(e)
        else:
            merged.append([int(s), int(e)])

    ev0, ev1 = cfg.event_span

    def rank(run):
        a, b = run[0], run[1] + 1
        overlap = max(0, min(b, ev1) - max(a, ev0))
        return (-overlap, -(b - a), a)

    a, last = min(merged, key=rank)
    return (a, last + 1), low_coverage


def auc_trapezoid(t, f) -> float:
    """Composite trapezoid ``0.5 * sum (t_j - t_{j-1}) (f_{j-1} + f_j)``."""
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    if t.size < 2:
        raise ValueError("auc_trapezoid needs at least two samples")
    if np.any(np.diff(t) <= 0):
        raise ValueError("sample times must be strictly increasing")
    return kernels.trapezoid(t, f)


def compute_metrics(
    change: ChangeSeries,
    window: Optional[tuple[int, int]],
    cfg: Optional[EventWindowConfig] = None,
    event_id: str = "",
    low_coverage: bool = False,
) -> ResilienceMetrics:
    """Duration, deepest change and trapezoid AUC over ``[a, b]``.

    Duration and change use observed samples only. For the AUC, hours
    missing inside the window are linearly interpolated, which leaves the
    trapezoid sum unchanged except at the edges where ``b`` has no sample:
    there the curve is closed at the last observed sample.
    """
    if window is None:
        return ResilienceMetrics(change.link_id, event_id, None, 0.0, 0.0, 0.0, False, low_coverage)
    a, b = window
    m = (change.hours >= a) & (change.hours <= b)
    t = change.hours[m]
    f = change.values[m]
    if t.size == 0:
        raise ValidationError(f"link {change.link_id}: window {window} holds no samples")
    duration = float(b - a)
    depth = float(f.min())
    auc = auc_trapezoid(t, f) if t.size >= 2 else 0.0
    if cfg is not None and not depth <= cfg.threshold:
        raise ValidationError(f"link {change.link_id}: window minimum {depth} above threshold")
    return ResilienceMetrics(change.link_id, event_id, (int(a), int(b)), duration, depth, auc, True, low_coverage)


def link_metrics(
    series: SpeedSeries,
    cfg: EventWindowConfig,
    event_id: str = "",
    exclude_spans: Sequence[tuple[int, int]] = (),
) -> tuple[ResilienceMetrics, BaselineProfile, Optional[ChangeSeries]]:
    """Baseline, change series and metrics for one link and one event."""
    baseline = build_baseline(series, cfg.event_span, cfg.baseline_lookback, exclude_spans)
    if baseline.insufficient:
        m = ResilienceMetrics(series.link_id, event_id, None, 0.0, 0.0, 0.0, False, False, True)
        return m, baseline, None
    change = relative_change(series, baseline)
    window, low = detect_window(change, cfg)
    return compute_metrics(change, window, cfg, event_id, low), baseline, change


METRIC_COLUMNS = [
    "link_id", "a", "b", "duration_h", "change_pct", "auc_pct_h", "affected", "low_coverage", "baseline_insufficient",
]
