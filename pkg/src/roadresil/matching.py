"""Attach point reports to road links.

A report matches a link when it lies strictly closer than the distance gate
(10 m, measured to the centreline), the directions agree and the normalised
road names are equal. Among links passing all three gates the nearest wins,
ties going to the smallest ``link_id``.
"""
from __future__ import annotations

import enum
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from roadresil import kernels
from roadresil.core import EventReport, RoadLink

logger = logging.getLogger(__name__)

CELL_DEG = 0.01


class FailureReason(str, enum.Enum):
    TooFar = "TooFar"
    DirectionMismatch = "DirectionMismatch"
    NameMismatch = "NameMismatch"
    NoCandidate = "NoCandidate"


@dataclass(frozen=True)
class MatchResult:
    report_id: str
    matched_link_id: Optional[str]
    distance_m: float
    failure_reason: Optional[FailureReason] = None

    @property
    def matched(self) -> bool:
        return self.matched_link_id is not None


def point_to_polyline_distance(p: tuple[float, float], geometry: Sequence[tuple[float, float]]) -> float:
    """Metres from ``p`` to the nearest point of the polyline.

    Uses an equirectangular projection centred at ``p``; accurate at the
    sub-kilometre scale the matching gate cares about.
    """
    lat = np.array([q[0] for q in geometry], dtype=float)
    lon = np.array([q[1] for q in geometry], dtype=float)
    return kernels.polyline_distance_m(p[0], p[1], lat, lon)


# --- direction -------------------------------------------------------------

_CARDINALS = {
    "N": 0.0, "NE": 45.0, "E": 90.0, "SE": 135.0, "S": 180.0, "SW": 225.0, "W": 270.0, "NW": 315.0,
}
_WORDS = {"north": "N", "south": "S", "east": "E", "west": "W"}


def normalize_direction(tag: Optional[str]) -> Optional[str]:
    """Canonical cardinal code (``"N"``, ``"SW"``...) or ``None``.

    Accepts codes, words ("northbound", "South West") and their ``nb``/``sb``
    style abbreviations. Numeric strings are not cardinals and give ``None``.
    """
    if tag is None:
        return None
    s = re.sub(r"[^a-z]", "", str(tag).lower())
    if not s:
        return None
    s = re.sub(r"bound$", "", s)
    if s in ("nb", "sb", "eb", "wb"):
        s = s[0]
    for word, code in _WORDS.items():
        s = s.replace(word, code.lower())
    code = s.upper()
    return code if code in _CARDINALS else None


def bearing_proxy(tag: Optional[str]) -> Optional[float]:
    """Bearing implied by a direction tag: numeric degrees or a cardinal."""
    if tag is None:
        return None
    try:
        return float(tag) % 360.0
    except (TypeError, ValueError):
        pass
    code = normalize_direction(tag)
    return None if code is None else _CARDINALS[code]


def angle_diff(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def directions_match(report_tag: Optional[str], link: RoadLink, tolerance_deg: float = 30.0) -> bool:
    rc = normalize_direction(report_tag)
    lc = normalize_direction(link.direction_tag)
    if rc is not None and lc is not None:
        return rc == lc
    proxy = bearing_proxy(report_tag)
    if proxy is None:
        return True
    return angle_diff(proxy, link.bearing) <= tolerance_deg


# --- spatial index ---------------------------------------------------------


def _cell(lat: float, lon: float) -> tuple[int, int]:
    return math.floor(lat / CELL_DEG), math.floor(lon / CELL_DEG)


class GridIndex:
    """Uniform 0.01-degree grid. Each link is registered in every cell its
    bounding box touches; queries probe the 3x3 block around the point."""

    def __init__(self, links: Iterable[RoadLink]):
        self.links: dict[str, RoadLink] = {}
        self._coords: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.cells: dict[tuple[int, int], list[str]] = defaultdict(list)
        for link in links:
            if link.link_id in self.links:
                raise ValueError(f"duplicate link id {link.link_id}")
            self.links[link.link_id] = link
            lat, lon = link.lats, link.lons
            self._coords[link.link_id] = (lat, lon)
            i0, j0 = _cell(lat.min(), lon.min())
            i1, j1 = _cell(lat.max(), lon.max())
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    self.cells[(i, j)].append(link.link_id)
        if not self.links:
            raise ValueError("cannot index an empty link set")

    def candidates(self, lat: float, lon: float) -> list[str]:
        ci, cj = _cell(lat, lon)
        seen = set()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                seen.update(self.cells.get((ci + di, cj + dj), ()))
        return sorted(seen)

    def distance(self, lat: float, lon: float, link_id: str) -> float:
        la, lo = self._coords[link_id]
        return kernels.polyline_distance_m(lat, lon, la, lo)


# --- matching --------------------------------------------------------------


def match_report(
    report: EventReport,
    index: GridIndex,
    max_distance_m: float = 10.0,
    bearing_tolerance_deg: float = 30.0,
) -> MatchResult:
    lat, lon = report.location
    cands = index.candidates(lat, lon)
    if not cands:
        return MatchResult(report.report_id, None, math.inf, FailureReason.NoCandidate)
    dist = {lid: index.distance(lat, lon, lid) for lid in cands}
    nearest = min(dist.values())

    near = [lid for lid in cands if dist[lid] < max_distance_m]
    if not near:
        return MatchResult(report.report_id, None, nearest, FailureReason.TooFar)
    aligned = [lid for lid in near if directions_match(report.direction_tag, index.links[lid], bearing_tolerance_deg)]
    if not aligned:
        return MatchResult(report.report_id, None, nearest, FailureReason.DirectionMismatch)
    named = [lid for lid in aligned if index.links[lid].road_name == report.road_name]
    if not named:
        return MatchResult(report.report_id, None, nearest, FailureReason.NameMismatch)
    best = min(named, key=lambda lid: (dist[lid], lid))
    return MatchResult(report.report_id, best, dist[best], None)


def match_all(
    reports: Sequence[EventReport],
    links: Sequence[RoadLink],
    max_distance_m: float = 10.0,
    bearing_tolerance_deg: float = 30.0,
    index: Optional[GridIndex] = None,
) -> tuple[list[MatchResult], Optional[float]]:
    """Match every report. Results are ordered by ``report_id`` (stable for
    duplicates); the rate is ``None`` when there are no reports."""
    if index is None:
        index = GridIndex(links)
    ordered = sorted(reports, key=lambda r: r.report_id)
    results = [match_report(r, index, max_distance_m, bearing_tolerance_deg) for r in ordered]
    if not results:
        return results, None
    rate = sum(r.matched for r in results) / len(results)
    return results, rate


def failure_counts(results: Sequence[MatchResult]) -> dict[str, int]:
    counts = {"matched": 0, **{f.value: 0 for f in FailureReason}}
    for r in results:
        counts["matched" if r.matched else r.failure_reason.value] += 1
    return counts


MATCH_COLUMNS = ["report_id", "link_id", "distance_m", "failure_reason"]


def match_rows(results: Sequence[MatchResult]):
    for r in results:
        yield [r.report_id, r.matched_link_id, r.distance_m, r.failure_reason.value if r.failure_reason else None]
