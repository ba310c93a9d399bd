"""Synthetic scenarios with known ground truth.

Each synthetic segment is a straight three-vertex polyline split into two map
links that share a TMC code, so conflation is exercised on every run. Speeds
follow an hour-of-day profile that repeats daily; an impacted segment gets a
drop of ``depth`` percent lasting ``duration`` hours, shaped as a plateau with
linear shoulders:

    f_k = -depth * min(1, (k + 1) / r, (duration - k) / r),  k = 0..duration-1

with shoulder width ``r = min(2, ceil(duration / 2))``. With zero noise the
pipeline must recover the duration, ``-depth`` and the trapezoid AUC of this
profile closed by ``f = 0`` at ``onset + duration``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import yaml

from roadresil import kernels
from roadresil.core import FunctionalClass, LaneCategory, Divider, format_hour, to_hour

BASE_SPEED = {"Freeway": 65.0, "Arterial": 45.0, "Collector": 35.0, "LocalStreet": 25.0}
SUBTYPES = {"Flood": ("Flood", "Heavy Rain"), "WinterStorm": ("Road Icy", "Heavy Snow"), "Fog": ("Fog",)}
_CARDINAL = ["N", "NE", "E", "SE", "S", "SW", "W", "NW"]


@dataclass(frozen=True)
class SyntheticScenario:
    seed: int = 0
    n_links: int = 50
    days: int = 14
    start: str = "2022-08-01T00:00"
    noise_sigma: float = 0.0
    event_type: str = "Flood"
    event_offset_hours: Optional[int] = None  # default: days*24 - 90
    event_span_hours: int = 24
    impact_fraction: float = 1.0
    depth_range: tuple[float, float] = (5.0, 60.0)
    duration_range: tuple[int, int] = (1, 36)
    reports_per_link: float = 3.0
    reliability_range: tuple[float, float] = (0.0, 10.0)
    origin: tuple[float, float] = (32.70, -97.10)

    def __post_init__(self):
        lo, hi = self.depth_range
        if not (0 < lo <= hi < 100):
            raise ValueError("drop depth must lie in (0, 100)")
        if not (1 <= self.duration_range[0] <= self.duration_range[1]):
            raise ValueError("duration range must be >= 1 hour")
        if not (0.0 <= self.impact_fraction <= 1.0):
            raise ValueError("impact_fraction must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        total = self.days * 24
        end = self.event_start_offset + self.event_span_hours + self.duration_range[1] + 1
        if end >= total or self.event_start_offset < 24:
            raise ValueError("event does not fit inside the simulated period")

    @property
    def event_start_offset(self) -> int:
        return self.days * 24 - 90 if self.event_offset_hours is None else self.event_offset_hours

    @property
    def event_span(self) -> tuple[int, int]:
        s = to_hour(self.start) + self.event_start_offset
        return s, s + self.event_span_hours


def drop_profile(depth: float, duration: int) -> np.ndarray:
    r = min(2, math.ceil(duration / 2))
    k = np.arange(duration)
    shape = np.minimum(1.0, np.minimum((k + 1) / r, (duration - k) / r))
    return -depth * shape


def diurnal_profile(v0: float) -> np.ndarray:
    h = np.arange(24)
    return v0 * (1.0 - 0.20 * np.exp(-((h - 8.0) ** 2) / 4.0) - 0.25 * np.exp(-((h - 17.5) ** 2) / 4.0))


def _destination(lat, lon, bearing_deg, dist_m):
    """Great-circle destination point."""
    R = kernels.EARTH_RADIUS_M
    p1, l1, b = math.radians(lat), math.radians(lon), math.radians(bearing_deg)
    d = dist_m / R
    p2 = math.asin(math.sin(p1) * math.cos(d) + math.cos(p1) * math.sin(d) * math.cos(b))
    l2 = l1 + math.atan2(math.sin(b) * math.sin(d) * math.cos(p1), math.cos(d) - math.sin(p1) * math.sin(p2))
    return math.degrees(p2), math.degrees(l2)


def gen_synthetic(scenario: SyntheticScenario, out_dir) -> dict[str, Path]:
    """Write links, speeds, reports, ground truth and a pipeline config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(scenario.seed)
    n = scenario.n_links
    cols = max(1, int(math.ceil(math.sqrt(n))))
    t0 = to_hour(scenario.start)
    hours = np.arange(t0, t0 + scenario.days * 24, dtype=np.int64)
    ev0, ev1 = scenario.event_span

    fclasses = rng.choice([e.value for e in FunctionalClass], size=n, p=[0.2, 0.15, 0.5, 0.15])
    lanes = rng.choice([e.value for e in LaneCategory], size=n, p=[0.25, 0.6, 0.15])
    dividers = rng.choice([e.value for e in Divider], size=n, p=[0.8, 0.1, 0.1])
    inter = rng.random(n) < 0.3
    front = rng.random(n) < 0.1
    alt = np.clip(rng.normal(14.4, 2.9, size=n), 5.0, 25.0)
    slope = np.abs(rng.normal(1.5, 1.3, size=n))
    bearings = rng.uniform(0.0, 360.0, size=n)
    lengths_m = rng.uniform(150.0, 400.0, size=n)
    impacted = rng.random(n) < scenario.impact_fraction
    depths = rng.uniform(*scenario.depth_range, size=n)
    durations = rng.integers(scenario.duration_range[0], scenario.duration_range[1] + 1, size=n)
    onsets = rng.integers(ev0, ev1 + 1, size=n)

    features = []
    speed_frames = []
    report_lines = []
    truth = []
    subtypes = SUBTYPES.get(scenario.event_type, (scenario.event_type,))
    rid = 0
    for i in range(n):
        tmc = f"T{i:05d}"
        lat0 = scenario.origin[0] + (i // cols) * 0.01 + 0.003
        lon0 = scenario.origin[1] + (i % cols) * 0.01 + 0.003
        half = lengths_m[i] / 2
        mid = _destination(lat0, lon0, bearings[i], half)
        end = _destination(lat0, lon0, bearings[i], lengths_m[i])
        name = f"Synthetic Road {i}"
        direction = _CARDINAL[int(((bearings[i] + 22.5) % 360) // 45)]
        for part, pts in enumerate((((lat0, lon0), mid), (mid, end))):
            features.append(
                {
                    "type": "Feature",
                    "geometry": {"type": "LineString", "coordinates": [[p[1], p[0]] for p in pts]},
                    "properties": {
                        "id": f"L{i:05d}{'ab'[part]}",
                        "tmc": tmc,
                        "fclass": str(fclasses[i]),
                        "lanes": str(lanes[i]),
                        "divider": str(dividers[i]),
                        "intersection": bool(inter[i]),
                        "frontage": bool(front[i]),
                        "min_alt_km": float(alt[i]),
                        "slope": float(slope[i]),
                        "name": name,
                        "direction": direction,
                    },
                }
            )

        base = diurnal_profile(BASE_SPEED[str(fclasses[i])])[hours % 24]
        f = np.zeros(hours.size)
        dur = int(durations[i]) if impacted[i] else 0
        if dur:
            k0 = int(onsets[i] - t0)
            f[k0 : k0 + dur] = drop_profile(float(depths[i]), dur)
        speed = base * (1.0 + f / 100.0)
        if scenario.noise_sigma > 0:
            speed = speed + rng.uniform(-scenario.noise_sigma, scenario.noise_sigma, size=hours.size)
        speed_frames.append(pd.DataFrame({"segment_id": tmc, "h": hours, "speed_mph": speed}))

        if dur:
            t = np.arange(int(onsets[i]), int(onsets[i]) + dur + 1, dtype=float)
            prof = np.r_[drop_profile(float(depths[i]), dur), 0.0]
            auc = 0.5 * float(np.sum(np.diff(t) * (prof[1:] + prof[:-1])))
            depth_true = float(prof.min())
        else:
            auc = 0.0
            depth_true = 0.0

        m = int(rng.poisson(scenario.reports_per_link)) if dur else 0
        w_sum = []
        for _ in range(m):
            frac = rng.uniform(0.05, 0.95)
            plat, plon = _destination(lat0, lon0, bearings[i], frac * lengths_m[i])
            start_h = int(onsets[i]) + int(rng.integers(0, dur))
            start_s = start_h * 3600 + int(rng.integers(0, 60)) * 60
            end_s = start_s + int(rng.integers(10, 180)) * 60
            w = float(np.round(rng.uniform(*scenario.reliability_range), 1))
            w_sum.append(w)
            report_lines.append(
                {
                    "id": f"R{rid:06d}",
                    "subtype": str(subtypes[rid % len(subtypes)]),
                    "lat": plat,
                    "lon": plon,
                    "start": _fmt_seconds(start_s),
                    "end": _fmt_seconds(end_s),
                    "road_name": name,
                    "direction": direction,
                    "reliability": w,
                }
            )
            rid += 1
        length_mi = lengths_m[i] / kernels.METERS_PER_MILE
        truth.append(
            {
                "link_id": tmc,
                "affected": bool(dur),
                "onset": format_hour(int(onsets[i])) if dur else "",
                "duration_h": dur,
                "change_pct": depth_true,
                "auc_pct_h": auc,
                "depth_pct": float(depths[i]) if dur else 0.0,
                "length_mi": length_mi,
                "report_count": m,
                "ups": math.fsum(w_sum) / (10.0 * length_mi),
            }
        )

    paths = {
        "links": out / "links.geojson",
        "speeds": out / "speeds.csv",
        "reports": out / "reports.ndjson",
        "truth": out / "truth.csv",
        "config": out / "config.yaml",
        "scenario": out / "scenario.json",
    }
    paths["links"].write_text(json.dumps({"type": "FeatureCollection", "features": features}, indent=None) + "\n")
    sp = pd.concat(speed_frames, ignore_index=True)
    sp.insert(1, "timestamp", [format_hour(h) for h in sp.pop("h")])
    sp.to_csv(paths["speeds"], index=False, lineterminator="\n")
    with open(paths["reports"], "w") as fh:
        for obj in report_lines:
            fh.write(json.dumps(obj, sort_keys=True) + "\n")
    pd.DataFrame(truth).to_csv(paths["truth"], index=False, lineterminator="\n")
    paths["scenario"].write_text(json.dumps(asdict(scenario), indent=2, sort_keys=True) + "\n")
    config = {
        "workspace": "workspace",
        "timezone": "America/Chicago",
        "inputs": {"links": "links.geojson", "speeds": "speeds.csv", "reports": "reports.ndjson"},
        "params": {"threshold": -1.0, "gap_hours": 2, "lookback_days": 30},
        "matching": {"distance_m": 10.0, "bearing_tolerance_deg": 30.0},
        "events": [
            {"name": "synth", "type": scenario.event_type, "start": format_hour(ev0), "end": format_hour(ev1)}
        ],
        "models": default_models(),
    }
    paths["config"].write_text(yaml.dump(config, Dumper=_PlainDumper, sort_keys=False))
    return paths


class _PlainDumper(yaml.SafeDumper):
    """Writes shared sub-lists out in full instead of as YAML anchors."""

    def ignore_aliases(self, data):
        return True


def default_models() -> list[dict]:
    """Duration (NB), change and AUC (Gaussian) models over link attributes."""
    linear = [
        {"variable": "functional_class", "encoding": "categorical"},
        {"variable": "lane_category", "encoding": "categorical"},
        {"variable": "is_intersection", "encoding": "categorical"},
        {"variable": "min_altitude", "encoding": "numeric"},
        {"variable": "slope", "encoding": "numeric"},
    ]
    common = {"linear": linear, "smooth": [], "tensor": {"variables": ["lat", "lon"], "k": [4, 4]}}
    return [
        {"response": "duration", "family": "NegBinLog", **common},
        {"response": "change", "family": "GaussianIdentity", **common},
        {"response": "auc", "family": "GaussianIdentity", **common},
    ]


def _fmt_seconds(s: int) -> str:
    return (datetime(1970, 1, 1) + timedelta(seconds=int(s))).strftime("%Y-%m-%dT%H:%M:%S")
