"""Shared domain types.

Timestamps are naive local clock times at hourly resolution. Internally they
are carried as integer hours since 1970-01-01T00:00 (a Thursday), which makes
hour-of-week arithmetic a pair of integer operations and keeps every kernel on
plain ``int64`` arrays.
"""
from __future__ import annotations

import enum
import math
import re
import string
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Optional, Sequence
from zoneinfo import ZoneInfo

import numpy as np

_EPOCH = datetime(1970, 1, 1)
HOURS_PER_WEEK = 168


class ValidationError(ValueError):
    """A value violates a domain invariant."""


class FunctionalClass(str, enum.Enum):
    Freeway = "Freeway"
    Arterial = "Arterial"
    Collector = "Collector"
    LocalStreet = "LocalStreet"


class LaneCategory(str, enum.Enum):
    One = "One"
    TwoThree = "TwoThree"
    FourPlus = "FourPlus"


class Divider(str, enum.Enum):
    NoDivider = "NoDivider"
    Legal = "Legal"
    Physical = "Physical"


class EventType(str, enum.Enum):
    Flood = "Flood"
    WinterStorm = "WinterStorm"
    Fog = "Fog"
    Other = "Other"


# reference levels for dummy coding in regression models
REFERENCE_LEVELS = {
    "functional_class": FunctionalClass.Freeway.value,
    "lane_category": LaneCategory.One.value,
    "divider": Divider.NoDivider.value,
    "is_intersection": "False",
    "is_frontage": "False",
}

CATEGORY_LEVELS = {
    "functional_class": [e.value for e in FunctionalClass],
    "lane_category": [e.value for e in LaneCategory],
    "divider": [e.value for e in Divider],
    "is_intersection": ["False", "True"],
    "is_frontage": ["False", "True"],
}

_SUBTYPE_MAP = {
    "flood": EventType.Flood,
    "heavy rain": EventType.Flood,
    "road icy": EventType.WinterStorm,
    "heavy snow": EventType.WinterStorm,
    "fog": EventType.Fog,
}


def event_type_from_subtype(raw_subtype: Optional[str]) -> EventType:
    """Map a crowdsourced report subtype to an :class:`EventType`.

    Matching is case and separator insensitive, so ``"HEAVY_RAIN"`` and
    ``"Heavy Rain"`` agree. Anything unrecognised is ``Other``.
    """
    if raw_subtype is None:
        return EventType.Other
    key = re.sub(r"[\s_\-]+", " ", str(raw_subtype)).strip().lower()
    return _SUBTYPE_MAP.get(key, EventType.Other)


_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")


def normalize_name(name: Optional[str]) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    if name is None:
        return ""
    s = _PUNCT.sub(" ", str(name).lower())
    return " ".join(s.split())


# --- time ------------------------------------------------------------------


def to_hour(value, tz: Optional[str] = None) -> int:
    """Integer hours since the epoch for a datetime or ISO string.

    Offset-aware values are converted to the local zone ``tz`` first (or have
    their offset dropped when no zone is given). Raises ``ValueError`` when the
    value is not aligned to a whole hour.
    """
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, str):
        value = datetime.fromisoformat(value.strip())
    if value.tzinfo is not None:
        if tz:
            value = value.astimezone(ZoneInfo(tz))
        value = value.replace(tzinfo=None)
    if value.minute or value.second or value.microsecond:
        raise ValueError(f"timestamp {value.isoformat()} is not hour-aligned")
    delta = value - _EPOCH
    return delta.days * 24 + delta.seconds // 3600


def to_seconds(value, tz: Optional[str] = None) -> int:
    """Integer seconds since the epoch; same zone handling as :func:`to_hour`."""
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, str):
        value = datetime.fromisoformat(value.strip())
    if value.tzinfo is not None:
        if tz:
            value = value.astimezone(ZoneInfo(tz))
        value = value.replace(tzinfo=None)
    delta = value - _EPOCH
    return delta.days * 86400 + delta.seconds


def hour_to_datetime(hour: int) -> datetime:
    return _EPOCH + timedelta(hours=int(hour))


def format_hour(hour: int) -> str:
    return hour_to_datetime(hour).strftime("%Y-%m-%dT%H:00")


def hour_of_week(hours):
    """Monday 00:00 is cell 0; Sunday 23:00 is cell 167."""
    h = np.asarray(hours, dtype=np.int64)
    return ((h // 24 + 3) % 7) * 24 + h % 24


def hour_of_day(hours):
    return np.asarray(hours, dtype=np.int64) % 24


# --- geometry --------------------------------------------------------------


def _course(lat1, lon1, lat2, lon2) -> tuple[float, float]:
    """Unit vector (east, north) of the initial great-circle course."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    y = math.sin(dl) * math.cos(p2)
    x = math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl)
    r = math.hypot(x, y)
    return y / r, x / r


def derive_bearing(geometry: Sequence[tuple[float, float]]) -> float:
    """Bearing in degrees [0, 360) of the first-to-last great circle.

    The forward course from the first vertex and the reversed back course
    from the last vertex are averaged on the circle. Their difference is the
    meridian convergence across the link, so the average is the course near
    the chord midpoint, and reversing the polyline adds exactly 180 degrees.
    """
    if len(geometry) < 2:
        raise ValidationError("geometry needs at least two points")
    (lat1, lon1), (lat2, lon2) = geometry[0], geometry[-1]
    if lat1 == lat2 and lon1 == lon2:
        raise ValidationError("degenerate geometry: first and last points coincide")
    fe, fn = _course(lat1, lon1, lat2, lon2)
    be, bn = _course(lat2, lon2, lat1, lon1)
    brg = math.degrees(math.atan2(fe - be, fn - bn)) % 360.0
    return 0.0 if brg == 360.0 else brg


def _check_geometry(geometry) -> tuple[tuple[float, float], ...]:
    pts = tuple((float(lat), float(lon)) for lat, lon in geometry)
    if len(pts) < 2:
        raise ValidationError("geometry needs at least two points")
    for lat, lon in pts:
        if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
            raise ValidationError(f"coordinate out of range: ({lat}, {lon})")
    return pts


# --- domain records --------------------------------------------------------


@dataclass(frozen=True)
class RoadLink:
    link_id: str
    geometry: tuple[tuple[float, float], ...]
    length: float
    functional_class: FunctionalClass
    lane_category: LaneCategory
    divider: Divider
    is_intersection: bool
    is_frontage: bool
    min_altitude: float
    slope: float
    road_name: str
    tmc_code: Optional[str] = None
    direction_tag: Optional[str] = None
    bearing: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "geometry", _check_geometry(self.geometry))
        if not self.length > 0:
            raise ValidationError(f"link {self.link_id}: length must be > 0, got {self.length}")
        object.__setattr__(self, "functional_class", FunctionalClass(self.functional_class))
        object.__setattr__(self, "lane_category", LaneCategory(self.lane_category))
        object.__setattr__(self, "divider", Divider(self.divider))
        object.__setattr__(self, "road_name", normalize_name(self.road_name))
        object.__setattr__(self, "bearing", derive_bearing(self.geometry))

    @property
    def lats(self) -> np.ndarray:
        return np.array([p[0] for p in self.geometry])

    @property
    def lons(self) -> np.ndarray:
        return np.array([p[1] for p in self.geometry])

    @property
    def midpoint(self) -> tuple[float, float]:
        """Mean of the vertices; used as the link's spatial coordinate."""
        return float(np.mean(self.lats)), float(np.mean(self.lons))


@dataclass(frozen=True)
class SpeedSeries:
    """Hourly observed speeds for one link. ``hours`` strictly increasing."""

    link_id: str
    hours: np.ndarray
    speeds: np.ndarray

    def __post_init__(self):
        h = np.array(self.hours, dtype=np.int64)
        s = np.array(self.speeds, dtype=float)
        if h.shape != s.shape or h.ndim != 1:
            raise ValidationError("hours and speeds must be 1-d and equally long")
        if h.size > 1 and np.any(np.diff(h) <= 0):
            raise ValidationError(f"series {self.link_id}: timestamps must be strictly increasing")
        if np.any(~(s > 0)):
            raise ValidationError(f"series {self.link_id}: speeds must be > 0")
        h.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "hours", h)
        object.__setattr__(self, "speeds", s)

    def __len__(self):
        return int(self.hours.size)


@dataclass(frozen=True)
class EventReport:
    """One crowdsourced report. Times are integer seconds since the epoch."""

    report_id: str
    raw_subtype: str
    location: tuple[float, float]
    start_time: int
    end_time: int
    road_name: str
    reliability: float
    direction_tag: Optional[str] = None
    event_type: EventType = field(init=False)

    def __post_init__(self):
        lat, lon = (float(v) for v in self.location)
        if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
            raise ValidationError(f"report {self.report_id}: location out of range")
        object.__setattr__(self, "location", (lat, lon))
        if self.end_time < self.start_time:
            raise ValidationError(f"report {self.report_id}: end_time before start_time")
        if not (0.0 <= float(self.reliability) <= 10.0):
            raise ValidationError(f"report {self.report_id}: reliability {self.reliability} outside [0, 10]")
        object.__setattr__(self, "reliability", float(self.reliability))
        object.__setattr__(self, "road_name", normalize_name(self.road_name))
        object.__setattr__(self, "event_type", event_type_from_subtype(self.raw_subtype))


@dataclass(frozen=True)
class BaselineProfile:
    """Hour-of-week means with an hour-of-day fallback.

    ``how_mean``/``how_n`` have 168 entries, ``hod_mean``/``hod_n`` 24. Means
    are NaN where the count is zero.
    """

    link_id: str
    how_mean: np.ndarray
    how_n: np.ndarray
    hod_mean: np.ndarray
    hod_n: np.ndarray
    n_eligible: int
    min_cell_obs: int = 3
    insufficient: bool = False

    def expected(self, hours) -> np.ndarray:
        """Baseline speed at each hour, NaN where neither table has data."""
        how = hour_of_week(hours)
        hod = hour_of_day(hours)
        use_cell = self.how_n[how] >= self.min_cell_obs
        return np.where(use_cell, self.how_mean[how], self.hod_mean[hod])


@dataclass(frozen=True)
class ResilienceMetrics:
    link_id: str
    event_id: str
    window: Optional[tuple[int, int]]
    duration_hours: float
    change_pct: float
    auc_pct_hours: float
    affected: bool
    low_coverage: bool = False
    baseline_insufficient: bool = False
