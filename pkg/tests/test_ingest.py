import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roadresil.core import Divider, FunctionalClass, LaneCategory, ValidationError, to_hour
from roadresil.ingest import (
    ParseError,
    conflate_by_tmc,
    link_rows,
    links_from_table,
    parse_lane_category,
    parse_links,
    parse_reports,
    parse_speeds,
)
from roadresil.workspace import write_artifact

from conftest import R_EARTH, make_link

PROPS = dict(
    tmc="T1", fclass="Arterial", lanes="2-3", divider="Physical", intersection=True, frontage=False,
    min_alt_km=14.2, slope=0.7, name="Main St", direction="E",
)


def feature(i, coords, **over):
    props = {"id": f"L{i}", **PROPS, **over}
    return {"type": "Feature", "geometry": {"type": "LineString", "coordinates": coords}, "properties": props}


def write_geojson(path, features):
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}))
    return path


def test_three_feature_fixture(tmp_path):
    feats = [
        feature(0, [[-97.10, 32.70], [-97.09, 32.70]]),
        feature(1, [[-97.10, 32.71], [-97.10, 32.72]], fclass="Freeway", lanes=">3", divider="Legal"),
        feature(2, [[-97.12, 32.70], [-97.11, 32.71]], fclass="Local Street", lanes=1, divider="None"),
    ]
    links = parse_links(write_geojson(tmp_path / "links.geojson", feats))
    assert [l.link_id for l in links] == ["L0", "L1", "L2"]
    assert links[1].functional_class is FunctionalClass.Freeway
    assert links[1].lane_category is LaneCategory.FourPlus
    assert links[1].divider is Divider.Legal
    assert links[2].functional_class is FunctionalClass.LocalStreet
    assert links[2].lane_category is LaneCategory.One
    assert links[0].geometry[0] == (32.70, -97.10)  # lat/lon order internally
    assert links[0].is_intersection is True and links[0].is_frontage is False


def test_equatorial_length_oracle(tmp_path):
    links = parse_links(write_geojson(tmp_path / "l.geojson", [feature(0, [[0.0, 0.0], [0.1, 0.0]])]))
    expected = R_EARTH * math.radians(0.1) / 1609.344
    assert links[0].length == pytest.approx(expected, rel=1e-12)
    assert links[0].length == pytest.approx(6.91, abs=0.005)


def test_missing_functional_class_cites_feature(tmp_path):
    feats = [feature(0, [[0, 0], [0.1, 0]]), feature(1, [[0, 0], [0.1, 0]])]
    del feats[1]["properties"]["fclass"]
    with pytest.raises(ParseError, match=r"feature 1: missing required attribute 'fclass'"):
        parse_links(write_geojson(tmp_path / "l.geojson", feats))


def test_exclusion_flags_filter_links(tmp_path):
    feats = [
        feature(0, [[0, 0], [0.1, 0]]),
        feature(1, [[0, 0], [0.1, 0]], ramp=True),
        feature(2, [[0, 0], [0.1, 0]], bridge="yes"),
        feature(3, [[0, 0], [0.1, 0]], tunnel=False),
    ]
    links = parse_links(write_geojson(tmp_path / "l.geojson", feats))
    assert [l.link_id for l in links] == ["L0", "L3"]


def test_csv_with_wkt(tmp_path):
    p = tmp_path / "links.csv"
    p.write_text(
        "id,tmc,fclass,lanes,divider,intersection,frontage,min_alt_km,slope,name,direction,geometry\n"
        'A,T1,Collector,2,No Divider,false,true,12.5,1.5,Oak Ave,N,"LINESTRING (-97.1 32.7, -97.1 32.71)"\n'
    )
    (link,) = parse_links(p)
    assert link.functional_class is FunctionalClass.Collector
    assert link.lane_category is LaneCategory.TwoThree
    assert link.is_frontage is True
    assert link.geometry == ((32.7, -97.1), (32.71, -97.1))


def test_bad_enum_literal_is_parse_error(tmp_path):
    with pytest.raises(ParseError, match="feature 0"):
        parse_links(write_geojson(tmp_path / "l.geojson", [feature(0, [[0, 0], [0.1, 0]], fclass="Highway")]))


@pytest.mark.parametrize("value,expected", [(1, "One"), ("2", "TwoThree"), (3, "TwoThree"), (6, "FourPlus"),
                                            ("2-3", "TwoThree"), (">3", "FourPlus"), ("One", "One")])
def test_lane_literals(value, expected):
    assert parse_lane_category(value).value == expected


# --- speeds ----------------------------------------------------------------


def write_speeds(path, rows):
    path.write_text("segment_id,timestamp,speed_mph\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))
    return path


def test_48_rows_one_series(tmp_path):
    h0 = to_hour("2022-08-01T00:00")
    from roadresil.core import format_hour

    rows = [("S1", format_hour(h0 + i), 40.0 + i) for i in range(48)]
    series, stats = parse_speeds(write_speeds(tmp_path / "s.csv", rows))
    assert len(series) == 1 and len(series[0]) == 48
    assert stats.rows == 48 and stats.duplicates == 0


def test_duplicate_keeps_last_and_logs(tmp_path, caplog):
    rows = [("S1", "2022-08-01T00:00", 50), ("S1", "2022-08-01T00:00", 55)]
    with caplog.at_level(logging.WARNING):
        series, stats = parse_speeds(write_speeds(tmp_path / "s.csv", rows))
    assert series[0].speeds.tolist() == [55.0]
    assert stats.duplicates == 1
    assert "duplicate" in caplog.text


def test_zero_speed_dropped(tmp_path):
    rows = [("S1", "2022-08-01T00:00", 50), ("S1", "2022-08-01T01:00", 0)]
    series, stats = parse_speeds(write_speeds(tmp_path / "s.csv", rows))
    assert series[0].speeds.tolist() == [50.0]
    assert stats.dropped_nonpositive == 1


def test_speed_rows_unsorted_input(tmp_path):
    rows = [("B", "2022-08-01T01:00", 30), ("A", "2022-08-01T02:00", 20), ("A", "2022-08-01T00:00", 21)]
    series, _ = parse_speeds(write_speeds(tmp_path / "s.csv", rows))
    assert [s.link_id for s in series] == ["A", "B"]
    assert np.diff(series[0].hours).tolist() == [2]


def test_bad_timestamp_cites_line(tmp_path):
    rows = [("S1", "2022-08-01T00:00", 50), ("S1", "2022-08-01T00:30", 50)]
    with pytest.raises(ParseError, match="line 3"):
        parse_speeds(write_speeds(tmp_path / "s.csv", rows))


def test_parsing_is_deterministic(tmp_path):
    rows = [("S1", f"2022-08-01T{h:02d}:00", 40 + h) for h in range(24)]
    p = write_speeds(tmp_path / "s.csv", rows)
    a, _ = parse_speeds(p)
    b, _ = parse_speeds(p)
    assert a[0].hours.tolist() == b[0].hours.tolist() and a[0].speeds.tolist() == b[0].speeds.tolist()


# --- reports ---------------------------------------------------------------


def write_reports(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))
    return path


BASE_REPORT = dict(id="R1", subtype="Heavy Rain", lat=32.7, lon=-97.1, start="2022-08-21T15:10:00",
                   end="2022-08-21T16:00:00", road_name="Main St", reliability=7)


def test_reports_mapping(tmp_path):
    objs = [BASE_REPORT, {**BASE_REPORT, "id": "R2", "subtype": "Road Icy", "direction": "NB"}]
    r1, r2 = parse_reports(write_reports(tmp_path / "r.ndjson", objs))
    assert r1.event_type.value == "Flood"
    assert r2.event_type.value == "WinterStorm"
    assert r2.direction_tag == "NB"
    assert r1.start_time % 3600 == 600


def test_reliability_out_of_range_is_row_error(tmp_path):
    objs = [BASE_REPORT, {**BASE_REPORT, "id": "R2", "reliability": 11}]
    with pytest.raises(ParseError, match="line 2"):
        parse_reports(write_reports(tmp_path / "r.ndjson", objs))


def test_missing_report_field(tmp_path):
    obj = dict(BASE_REPORT)
    del obj["lat"]
    with pytest.raises(ParseError, match="line 1: missing field 'lat'"):
        parse_reports(write_reports(tmp_path / "r.ndjson", [obj]))


# --- conflation ------------------------------------------------------------


def test_weighted_mode_and_mean():
    a = make_link("a", ((0.0, 0.0), (0.0, 0.01)), length=1.0, tmc="T", lane_category="One", min_altitude=10.0)
    b = make_link("b", ((0.0, 0.01), (0.0, 0.04)), length=3.0, tmc="T", lane_category="TwoThree", min_altitude=20.0)
    (m,) = conflate_by_tmc([a, b])
    assert m.link_id == "T"
    assert m.lane_category is LaneCategory.TwoThree
    assert m.min_altitude == 17.5
    assert m.length == 4.0
    assert m.geometry == ((0.0, 0.0), (0.0, 0.01), (0.0, 0.04))


def test_weighted_mode_tie_breaks_lexicographically():
    a = make_link("a", length=2.0, tmc="T", divider="Physical")
    b = make_link("b", length=2.0, tmc="T", divider="Legal")
    (m,) = conflate_by_tmc([a, b])
    assert m.divider is Divider.Legal


def test_single_link_group_identity():
    a = make_link("a", tmc="T", slope=2.5)
    (m,) = conflate_by_tmc([a])
    for f in ("geometry", "length", "functional_class", "lane_category", "divider", "min_altitude", "slope", "road_name"):
        assert getattr(m, f) == getattr(a, f)


def test_conflation_requires_tmc():
    with pytest.raises(ValidationError):
        conflate_by_tmc([make_link("a")])


@given(st.lists(st.tuples(st.floats(0.01, 5), st.floats(0, 30), st.sampled_from(["One", "TwoThree", "FourPlus"])),
                min_size=1, max_size=6), st.randoms())
def test_conflation_properties(parts, rnd):
    links = [make_link(f"l{i}", length=L, tmc="T", min_altitude=alt, lane_category=lc) for i, (L, alt, lc) in enumerate(parts)]
    (m,) = conflate_by_tmc(links)
    assert m.length == pytest.approx(math.fsum(L for L, _, _ in parts), abs=1e-9)
    shuffled = links[:]
    rnd.shuffle(shuffled)
    (m2,) = conflate_by_tmc(shuffled)
    assert m2.min_altitude == pytest.approx(m.min_altitude, rel=1e-12, abs=1e-12)
    assert m2.lane_category == m.lane_category


def test_conflation_output_sorted_by_code():
    links = [make_link(f"l{i}", tmc=t) for i, t in enumerate(["T3", "T1", "T2", "T1"])]
    assert [m.link_id for m in conflate_by_tmc(links)] == ["T1", "T2", "T3"]


def test_link_table_roundtrip(tmp_path):
    links = [make_link("a", ((32.7, -97.1), (32.70001, -97.0912345678)), tmc="T", direction="E", is_frontage=True)]
    p = tmp_path / "links.csv"
    from roadresil.ingest import LINK_COLUMNS

    write_artifact(p, "links", LINK_COLUMNS, link_rows(links))
    (back,) = links_from_table(p)
    assert back == links[0]
