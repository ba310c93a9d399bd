"""User-perceived severity, hourly intensity labels and report windows."""
from __future__ import annotations

import enum
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from roadresil.core import EventReport, EventType, RoadLink

LIGHT_MAX = 10


class Intensity(str, enum.Enum):
    None_ = "None"
    Light = "Light"
    Heavy = "Heavy"


@dataclass(frozen=True)
class UpsRecord:
    link_id: str
    event_type: EventType
    ups: float
    report_count: int


@dataclass(frozen=True)
class IntensityLabel:
    hour: int
    event_type: EventType
    report_count: int
    label: Intensity


@dataclass(frozen=True)
class ReportWindow:
    first: int  # hour
    last: int  # hour
    count: int
    duration_h: int


def ups(link: RoadLink, reports: Sequence[EventReport], event_type: Optional[EventType] = None) -> UpsRecord:
    """Reliability-weighted report density: ``sum(w_i) / (10 L)`` per mile."""
    if event_type is None:
        types = {r.event_type for r in reports}
        event_type = types.pop() if len(types) == 1 else EventType.Other
    total = math.fsum(r.reliability for r in reports)
    return UpsRecord(link.link_id, event_type, total / (10.0 * link.length), len(reports))


def intensity_of(count: int) -> Intensity:
    if count <= 0:
        return Intensity.None_
    return Intensity.Light if count <= LIGHT_MAX else Intensity.Heavy


def classify_hours(
    reports: Iterable[EventReport],
    span: Optional[tuple[int, int]] = None,
    event_types: Optional[Sequence[EventType]] = None,
) -> list[IntensityLabel]:
    """Label every hour of ``span`` (inclusive) for every event type.

    Reports are counted in the hour containing their start time. Without an
    explicit span the range of report start hours is used; without explicit
    types, the types present in the reports.
    """
    reports = list(reports)
    counts: dict[EventType, Counter] = defaultdict(Counter)
    for r in reports:
        counts[r.event_type][r.start_time // 3600] += 1
    if span is None:
        if not reports:
            return []
        starts = [r.start_time // 3600 for r in reports]
        span = (min(starts), max(starts))
    if event_types is None:
        event_types = sorted(counts, key=lambda e: e.value)
    out = []
    for et in event_types:
        c = counts.get(et, Counter())
        for h in range(span[0], span[1] + 1):
            n = c.get(h, 0)
            out.append(IntensityLabel(h, et, n, intensity_of(n)))
    return out


def report_window(reports: Sequence[EventReport]) -> Optional[ReportWindow]:
    """First start floored and last end ceiled to whole hours."""
    if not reports:
        return None
    first = min(r.start_time for r in reports) // 3600
    last = -(-max(r.end_time for r in reports) // 3600)
    return ReportWindow(int(first), int(last), len(reports), int(last - first))


@dataclass(frozen=True)
class AggregateSeries:
    hours: np.ndarray
    mean: np.ndarray
    contributors: np.ndarray


def network_aggregate(series: Iterable) -> AggregateSeries:
    """Unweighted hourly mean across series exposing ``hours`` and ``values``.

    Hours with no contributing series are omitted.
    """
    hs, vs = [], []
    for s in series:
        hs.append(np.asarray(s.hours, dtype=np.int64))
        vs.append(np.asarray(s.values, dtype=float))
    if not hs:
        return AggregateSeries(np.empty(0, np.int64), np.empty(0), np.empty(0, np.int64))
    h = np.concatenate(hs)
    v = np.concatenate(vs)
    keep = np.isfinite(v)
    h, v = h[keep], v[keep]
    hours, inv = np.unique(h, return_inverse=True)
    sums = np.bincount(inv, weights=v, minlength=hours.size)
    n = np.bincount(inv, minlength=hours.size)
    return AggregateSeries(hours, sums / n, n.astype(np.int64))
