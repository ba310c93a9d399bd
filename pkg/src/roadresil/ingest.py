"""Parsers for links, speeds and reports, and TMC conflation.

File schemas
------------
links (GeoJSON)
    FeatureCollection of LineString features. Properties: ``id``, ``tmc``,
    ``fclass``, ``lanes``, ``divider``, ``intersection``, ``frontage``,
    ``min_alt_km``, ``slope``, ``name``, ``direction``; optional
    ``length_mi`` and exclusion flags ``ramp``, ``bridge``, ``tunnel``.
links (CSV)
    The same columns plus ``geometry`` holding a WKT LINESTRING in lon/lat
    order.
speeds (CSV)
    ``segment_id,timestamp,speed_mph`` with timestamps ``YYYY-MM-DDTHH:00``.
reports (NDJSON)
    One object per line: ``id``, ``subtype``, ``lat``, ``lon``, ``start``,
    ``end``, ``road_name``, ``direction`` (optional), ``reliability``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import shapely.wkt

from roadresil import kernels
from roadresil.core import (
    Divider,
    EventReport,
    FunctionalClass,
    LaneCategory,
    RoadLink,
    SpeedSeries,
    ValidationError,
    to_hour,
    to_seconds,
)

logger = logging.getLogger(__name__)

REQUIRED_LINK_FIELDS = (
    "id", "fclass", "lanes", "divider", "intersection", "frontage", "min_alt_km", "slope", "name",
)
EXCLUSION_FLAGS = ("ramp", "bridge", "tunnel")


class ParseError(ValueError):
    """A row or feature could not be parsed. ``where`` locates it in the file."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


# --- enum literals ---------------------------------------------------------


def _key(s) -> str:
    return "".join(ch for ch in str(s).lower() if ch.isalnum() or ch in "<>+")


_FCLASS = {
    "freeway": FunctionalClass.Freeway,
    "arterial": FunctionalClass.Arterial,
    "collector": FunctionalClass.Collector,
    "localstreet": FunctionalClass.LocalStreet,
    "local": FunctionalClass.LocalStreet,
}
_LANES = {
    "one": LaneCategory.One,
    "1": LaneCategory.One,
    "1lane": LaneCategory.One,
    "twothree": LaneCategory.TwoThree,
    "23": LaneCategory.TwoThree,
    "23lanes": LaneCategory.TwoThree,
    "fourplus": LaneCategory.FourPlus,
    "4+": LaneCategory.FourPlus,
    ">3": LaneCategory.FourPlus,
    ">3lanes": LaneCategory.FourPlus,
}
_DIVIDER = {
    "nodivider": Divider.NoDivider,
    "none": Divider.NoDivider,
    "no": Divider.NoDivider,
    "legal": Divider.Legal,
    "legaldivider": Divider.Legal,
    "physical": Divider.Physical,
    "physicaldivider": Divider.Physical,
}


def parse_functional_class(value) -> FunctionalClass:
    try:
        return _FCLASS[_key(value)]
    except KeyError:
        raise ValueError(f"invalid functional class literal {value!r}") from None


def parse_lane_category(value) -> LaneCategory:
    """Accepts enum names, Table-style labels ("2-3", ">3") or a lane count."""
    if not isinstance(value, bool):
        try:
            n = float(value)
        except (TypeError, ValueError):
            n = None
        if n is not None and n.is_integer() and n >= 1:
            return LaneCategory.One if n == 1 else LaneCategory.TwoThree if n <= 3 else LaneCategory.FourPlus
    try:
        return _LANES[_key(value)]
    except KeyError:
        raise ValueError(f"invalid lane category literal {value!r}") from None


def parse_divider(value) -> Divider:
    try:
        return _DIVIDER[_key(value)]
    except KeyError:
        raise ValueError(f"invalid divider literal {value!r}") from None


def parse_flag(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)) and value in (0, 1):
        return bool(value)
    k = str(value).strip().lower()
    if k in {"true", "t", "yes", "y", "1"}:
        return True
    if k in {"false", "f", "no", "n", "0", ""}:
        return False
    raise ValueError(f"invalid boolean literal {value!r}")


def _blank(v) -> bool:
    return v is None or (isinstance(v, float) and math.isnan(v)) or (isinstance(v, str) and v.strip() == "")


# --- links -----------------------------------------------------------------


def geometry_length_miles(geometry) -> float:
    lat = np.array([p[0] for p in geometry])
    lon = np.array([p[1] for p in geometry])
    return kernels.polyline_length_m(lat, lon) / kernels.METERS_PER_MILE


def _link_from_props(props: dict, geometry, where: str) -> Optional[RoadLink]:
    for name in REQUIRED_LINK_FIELDS:
        if name not in props or (_blank(props[name]) and name not in ("name",)):
            raise ParseError(where, f"missing required attribute {name!r}")
    try:
        if any(parse_flag(props.get(f, False)) for f in EXCLUSION_FLAGS if not _blank(props.get(f))):
            return None
        length = props.get("length_mi")
        if _blank(length):
            length = geometry_length_miles(geometry)
        tmc = props.get("tmc")
        direction = props.get("direction")
        return RoadLink(
            link_id=str(props["id"]),
            geometry=geometry,
            length=float(length),
            functional_class=parse_functional_class(props["fclass"]),
            lane_category=parse_lane_category(props["lanes"]),
            divider=parse_divider(props["divider"]),
            is_intersection=parse_flag(props["intersection"]),
            is_frontage=parse_flag(props["frontage"]),
            min_altitude=float(props["min_alt_km"]),
            slope=float(props["slope"]),
            road_name="" if _blank(props["name"]) else str(props["name"]),
            tmc_code=None if _blank(tmc) else str(tmc),
            direction_tag=None if _blank(direction) else str(direction),
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(where, str(exc)) from exc


def _geojson_coords(geom: dict, where: str):
    if not geom:
        raise ParseError(where, "missing required attribute 'geometry'")
    gtype = geom.get("type")
    if gtype == "LineString":
        coords = geom["coordinates"]
    elif gtype == "MultiLineString":
        coords = [c for part in geom["coordinates"] for c in part]
    else:
        raise ParseError(where, f"unsupported geometry type {gtype!r}")
    return [(float(c[1]), float(c[0])) for c in coords]


def parse_links(path, format: Optional[str] = None) -> list[RoadLink]:
    """Parse a GeoJSON or WKT-CSV link file.

    Links flagged as ramp, bridge or tunnel are dropped; the count is logged.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    links: list[RoadLink] = []
    excluded = 0
    if fmt in ("geojson", "json"):
        data = json.loads(path.read_text())
        for i, feat in enumerate(data.get("features", [])):
            where = f"feature {i}"
            coords = _geojson_coords(feat.get("geometry"), where)
            link = _link_from_props(feat.get("properties") or {}, coords, where)
            if link is None:
                excluded += 1
            else:
                links.append(link)
    elif fmt == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            for i, row in enumerate(csv.DictReader(fh)):
                where = f"line {i + 2}"
                wkt = row.get("geometry")
                if _blank(wkt):
                    raise ParseError(where, "missing required attribute 'geometry'")
                try:
                    geom = shapely.wkt.loads(wkt)
                except Exception as exc:
                    raise ParseError(where, f"bad WKT geometry: {exc}") from exc
                coords = [(float(y), float(x)) for x, y in geom.coords]
                link = _link_from_props(row, coords, where)
                if link is None:
                    excluded += 1
                else:
                    links.append(link)
    else:
        raise ValueError(f"unsupported link format {fmt!r}")
    if excluded:
        logger.info("%s: excluded %d ramp/bridge/tunnel links", path.name, excluded)
    ids = [l.link_id for l in links]
    if len(set(ids)) != len(ids):
        dup = sorted({x for x in ids if ids.count(x) > 1})[:5]
        raise ParseError(path.name, f"duplicate link ids {dup}")
    return links


# --- speeds ----------------------------------------------------------------


@dataclass(frozen=True)
class SpeedParseStats:
    rows: int
    duplicates: int
    dropped_nonpositive: int


def parse_speeds(path, format: str = "csv", tz: Optional[str] = None) -> tuple[list[SpeedSeries], SpeedParseStats]:
    """Parse hourly speeds into one :class:`SpeedSeries` per segment.

    Duplicate (segment, hour) rows keep the last one in file order. Rows with
    non-positive speed are dropped, meaning the hour is missing.
    """
    if format != "csv":
        raise ValueError(f"unsupported speed format {format!r}")
    df = pd.read_csv(path, dtype={"segment_id": str, "timestamp": str}, keep_default_na=False,
                     float_precision="round_trip")
    missing = {"segment_id", "timestamp", "speed_mph"} - set(df.columns)
    if missing:
        raise ParseError(Path(path).name, f"missing columns {sorted(missing)}")
    n = len(df)
    ts = pd.to_datetime(df["timestamp"], format="%Y-%m-%dT%H:%M", errors="coerce")
    hours = np.empty(n, dtype=np.int64)
    ok = ts.notna().to_numpy()
    if ok.any():
        good = ts[ok]
        if (good.dt.minute != 0).any():
            bad = int(np.flatnonzero(ok)[np.flatnonzero((good.dt.minute != 0).to_numpy())[0]])
            raise ParseError(f"line {bad + 2}", f"timestamp {df['timestamp'].iat[bad]!r} is not hour-aligned")
        hours[ok] = good.to_numpy().astype("datetime64[h]").astype(np.int64)
    for i in np.flatnonzero(~ok):
        try:
            hours[i] = to_hour(df["timestamp"].iat[i], tz)
        except (ValueError, TypeError) as exc:
            raise ParseError(f"line {i + 2}", f"unparseable timestamp {df['timestamp'].iat[i]!r}") from exc
    speed = pd.to_numeric(df["speed_mph"], errors="coerce").to_numpy(dtype=float)
    if np.isnan(speed).any():
        i = int(np.flatnonzero(np.isnan(speed))[0])
        raise ParseError(f"line {i + 2}", f"unparseable speed {df['speed_mph'].iat[i]!r}")

    frame = pd.DataFrame({"id": df["segment_id"].astype(str).to_numpy(), "hour": hours, "speed": speed})
    before = len(frame)
    frame = frame.drop_duplicates(["id", "hour"], keep="last")
    duplicates = before - len(frame)
    if duplicates:
        logger.warning("%s: %d duplicate (segment, hour) rows, last write kept", Path(path).name, duplicates)
    keep = frame["speed"].to_numpy() > 0
    dropped = int((~keep).sum())
    if dropped:
        logger.info("%s: dropped %d rows with non-positive speed", Path(path).name, dropped)
    frame = frame[keep].sort_values(["id", "hour"], kind="stable")

    series = []
    ids = frame["id"].to_numpy()
    h = frame["hour"].to_numpy()
    s = frame["speed"].to_numpy()
    if len(ids):
        cuts = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, len(ids)]):
            series.append(SpeedSeries(str(ids[lo]), h[lo:hi], s[lo:hi]))
    return series, SpeedParseStats(rows=n, duplicates=int(duplicates), dropped_nonpositive=dropped)


# --- reports ---------------------------------------------------------------


def parse_reports(path, format: str = "ndjson", tz: Optional[str] = None) -> list[EventReport]:
    if format != "ndjson":
        raise ValueError(f"unsupported report format {format!r}")
    reports = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(where, f"invalid JSON: {exc.msg}") from exc
            for name in ("id", "subtype", "lat", "lon", "start", "end", "reliability"):
                if name not in obj:
                    raise ParseError(where, f"missing field {name!r}")
            try:
                reports.append(
                    EventReport(
                        report_id=str(obj["id"]),
                        raw_subtype=str(obj["subtype"]),
                        location=(float(obj["lat"]), float(obj["lon"])),
                        start_time=to_seconds(obj["start"], tz),
                        end_time=to_seconds(obj["end"], tz),
                        road_name=obj.get("road_name") or "",
                        reliability=float(obj["reliability"]),
                        direction_tag=obj.get("direction") or None,
                    )
                )
            except (ValueError, TypeError) as exc:
                raise ParseError(where, str(exc)) from exc
    return reports


# --- conflation ------------------------------------------------------------


def _weighted_mode(values, weights):
    acc = defaultdict(list)
    for v, w in zip(values, weights):
        acc[v].append(w)
    totals = {v: math.fsum(ws) for v, ws in acc.items()}
    best = max(totals.values())
    return min((v for v, t in totals.items() if t == best), key=lambda v: "" if v is None else str(v))


def _weighted_mean(values, weights):
    return math.fsum(v * w for v, w in zip(values, weights)) / math.fsum(weights)


def conflate_by_tmc(links: list[RoadLink]) -> list[RoadLink]:
    """Merge links sharing a TMC code into one link per code.

    Categorical attributes take the length-weighted mode (ties go to the
    lexicographically smallest value), numeric ones the length-weighted mean.
    Geometry is the concatenation in input order. Output is sorted by code.
    """
    groups: dict[str, list[RoadLink]] = defaultdict(list)
    for link in links:
        if link.tmc_code is None:
            raise ValidationError(f"link {link.link_id} has no tmc_code")
        groups[link.tmc_code].append(link)

    out = []
    for tmc in sorted(groups):
        g = groups[tmc]
        if len(g) == 1:
            out.append(RoadLink(**{**_fields(g[0]), "link_id": tmc}))
            continue
        w = [l.length for l in g]
        tags = {l.direction_tag for l in g if l.direction_tag}
        if len(tags) > 1:
            logger.warning("tmc %s: conflicting direction tags %s, keeping the weighted mode", tmc, sorted(tags))
        geometry = []
        for l in g:
            pts = list(l.geometry)
            if geometry and pts[0] == geometry[-1]:
                pts = pts[1:]
            geometry.extend(pts)
        out.append(
            RoadLink(
                link_id=tmc,
                tmc_code=tmc,
                geometry=geometry,
                length=math.fsum(w),
                functional_class=_weighted_mode([l.functional_class.value for l in g], w),
                lane_category=_weighted_mode([l.lane_category.value for l in g], w),
                divider=_weighted_mode([l.divider.value for l in g], w),
                is_intersection=_weighted_mode([l.is_intersection for l in g], w),
                is_frontage=_weighted_mode([l.is_frontage for l in g], w),
                min_altitude=_weighted_mean([l.min_altitude for l in g], w),
                slope=_weighted_mean([l.slope for l in g], w),
                road_name=_weighted_mode([l.road_name for l in g], w),
                direction_tag=_weighted_mode([l.direction_tag for l in g], w),
            )
        )
    return out


def _fields(link: RoadLink) -> dict:
    return dict(
        link_id=link.link_id,
        tmc_code=link.tmc_code,
        geometry=link.geometry,
        length=link.length,
        functional_class=link.functional_class,
        lane_category=link.lane_category,
        divider=link.divider,
        is_intersection=link.is_intersection,
        is_frontage=link.is_frontage,
        min_altitude=link.min_altitude,
        slope=link.slope,
        road_name=link.road_name,
        direction_tag=link.direction_tag,
    )


# --- link table I/O --------------------------------------------------------

LINK_COLUMNS = [
    "id", "tmc", "fclass", "lanes", "divider", "intersection", "frontage",
    "min_alt_km", "slope", "name", "direction", "length_mi", "bearing", "geometry",
]


def link_rows(links: list[RoadLink]):
    for l in sorted(links, key=lambda l: l.link_id):
        wkt = "LINESTRING (" + ", ".join(f"{lon!r} {lat!r}" for lat, lon in l.geometry) + ")"
        yield [
            l.link_id, l.tmc_code, l.functional_class.value, l.lane_category.value, l.divider.value,
            l.is_intersection, l.is_frontage, l.min_altitude, l.slope, l.road_name, l.direction_tag,
            l.length, l.bearing, wkt,
        ]


def links_from_table(path) -> list[RoadLink]:
    """Inverse of :func:`link_rows` for the workspace ``links.csv`` artifact."""
    from roadresil.workspace import read_artifact

    df = read_artifact(path, dtype=str)
    links = []
    for i, row in enumerate(df.to_dict("records")):
        coords = [tuple(map(float, pair.split())) for pair in row["geometry"][row["geometry"].index("(") + 1 : -1].split(",")]
        links.append(
            RoadLink(
                link_id=row["id"],
                tmc_code=None if _blank(row["tmc"]) else row["tmc"],
                geometry=[(lat, lon) for lon, lat in coords],
                length=float(row["length_mi"]),
                functional_class=row["fclass"],
                lane_category=row["lanes"],
                divider=row["divider"],
                is_intersection=parse_flag(row["intersection"]),
                is_frontage=parse_flag(row["frontage"]),
                min_altitude=float(row["min_alt_km"]),
                slope=float(row["slope"]),
                road_name="" if _blank(row["name"]) else row["name"],
                direction_tag=None if _blank(row["direction"]) else row["direction"],
            )
        )
    return links
