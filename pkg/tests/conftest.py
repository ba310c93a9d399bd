import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from roadresil.core import EventReport, RoadLink, SpeedSeries, to_hour

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

R_EARTH = 6371008.8


def make_link(
    link_id="L1",
    geometry=((32.70, -97.10), (32.70, -97.09)),
    length=None,
    name="Main St",
    direction=None,
    tmc=None,
    **attrs,
):
    """A RoadLink with plausible defaults; length defaults to the haversine length in miles."""
    if length is None:
        length = sum(
            haversine(a[0], a[1], b[0], b[1]) for a, b in zip(geometry[:-1], geometry[1:])
        ) / 1609.344
    base = dict(
        functional_class="Arterial",
        lane_category="TwoThree",
        divider="NoDivider",
        is_intersection=False,
        is_frontage=False,
        min_altitude=14.0,
        slope=1.0,
    )
    base.update(attrs)
    return RoadLink(
        link_id=link_id, geometry=geometry, length=length, road_name=name, tmc_code=tmc, direction_tag=direction, **base
    )


def make_report(report_id="R1", lat=32.70, lon=-97.095, subtype="Flood", start="2022-08-21T15:10:00",
                end="2022-08-21T16:00:00", name="Main St", direction=None, reliability=5.0):
    return EventReport(
        report_id=report_id,
        raw_subtype=subtype,
        location=(lat, lon),
        start_time=_secs(start),
        end_time=_secs(end),
        road_name=name,
        reliability=reliability,
        direction_tag=direction,
    )


def _secs(value):
    from roadresil.core import to_seconds

    return to_seconds(value)


def haversine(lat1, lon1, lat2, lon2):
    """Independent scalar great-circle distance in metres."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp, dl = p2 - p1, math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * R_EARTH * math.asin(math.sqrt(a))


def series_from(link_id, start, values):
    """Consecutive hourly series beginning at ``start`` (ISO string or hour)."""
    h0 = to_hour(start)
    values = np.asarray(values, dtype=float)
    return SpeedSeries(link_id, np.arange(h0, h0 + values.size), values)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
