import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roadresil.core import EventType, to_hour
from roadresil.resilience import ChangeSeries
from roadresil.severity import (
    Intensity,
    classify_hours,
    intensity_of,
    network_aggregate,
    report_window,
    ups,
)

from conftest import make_link, make_report


def hour_stamp(h, minute=0):
    from roadresil.core import format_hour

    return f"{format_hour(h)}:{minute:02d}"


def reports_in_hour(h, n, subtype="Flood", start_id=0):
    return [
        make_report(f"R{start_id + i}", subtype=subtype, start=hour_stamp(h, i % 60), end=hour_stamp(h + 1))
        for i in range(n)
    ]


def test_ups_examples():
    link1 = make_link("A", length=1.0)
    assert ups(link1, [make_report(reliability=10)]).ups == 1.0
    half = make_link("B", length=0.5)
    rec = ups(half, [make_report("a", reliability=5), make_report("b", reliability=5)])
    assert rec.ups == 2.0 and rec.report_count == 2 and rec.event_type is EventType.Flood
    empty = ups(link1, [])
    assert empty.ups == 0.0 and empty.report_count == 0


@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 10)), max_size=12), st.floats(0.01, 5))
def test_ups_homogeneity_and_additivity(weights, length):
    reps = [make_report(f"r{i}", reliability=w) for i, w in enumerate(weights)]
    link = make_link("L", length=length)
    base = ups(link, reps).ups
    assert (base == 0) == (len(reps) == 0 or all(w == 0 for w in weights))
    assert ups(make_link("L", length=2 * length), reps).ups == pytest.approx(base / 2, rel=1e-12, abs=1e-300)
    doubled = [make_report(f"r{i}", reliability=w / 2) for i, w in enumerate(weights)]
    assert ups(link, doubled).ups * 2 == pytest.approx(base, rel=1e-12, abs=1e-300)
    k = len(reps) // 2
    assert ups(link, reps[:k]).ups + ups(link, reps[k:]).ups == pytest.approx(base, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("count,label", [(0, Intensity.None_), (1, Intensity.Light), (5, Intensity.Light),
                                         (10, Intensity.Light), (11, Intensity.Heavy), (200, Intensity.Heavy)])
def test_intensity_thresholds(count, label):
    assert intensity_of(count) is label


def test_classify_hours_examples():
    h0 = to_hour("2022-08-21T15:00")
    reps = reports_in_hour(h0 + 1, 5) + reports_in_hour(h0 + 2, 11, start_id=100)
    labels = classify_hours(reps, span=(h0, h0 + 3), event_types=[EventType.Flood])
    assert [l.label for l in labels] == [Intensity.None_, Intensity.Light, Intensity.Heavy, Intensity.None_]
    assert [l.report_count for l in labels] == [0, 5, 11, 0]


@given(st.lists(st.tuples(st.integers(0, 30), st.sampled_from(["Flood", "Road Icy", "Fog"])), max_size=60))
def test_classify_partitions_span(items):
    h0 = to_hour("2022-02-02T00:00")
    reps = [make_report(f"R{i}", subtype=s, start=hour_stamp(h0 + h), end=hour_stamp(h0 + h + 1))
            for i, (h, s) in enumerate(items)]
    types = [EventType.Flood, EventType.WinterStorm, EventType.Fog]
    labels = classify_hours(reps, span=(h0, h0 + 30), event_types=types)
    assert len(labels) == 31 * 3
    keys = {(l.hour, l.event_type) for l in labels}
    assert len(keys) == len(labels)
    assert sum(l.report_count for l in labels) == len(reps)
    for l in labels:
        assert l.label is intensity_of(l.report_count)


def test_report_window_72_hours():
    reps = [
        make_report("a", start="2022-02-02T16:20:00", end="2022-02-02T18:00:00"),
        make_report("b", start="2022-02-04T09:00:00", end="2022-02-05T15:40:00"),
        make_report("c", start="2022-02-03T10:00:00", end="2022-02-03T11:00:00"),
    ]
    w = report_window(reps)
    assert w.first == to_hour("2022-02-02T16:00") and w.last == to_hour("2022-02-05T16:00")
    assert w.duration_h == 72 and w.count == 3
    shuffled = reps[:]
    random.Random(1).shuffle(shuffled)
    assert report_window(shuffled) == w


def test_report_window_degenerate():
    assert report_window([]) is None
    w = report_window([make_report(start="2022-08-21T15:10:00", end="2022-08-21T15:10:00")])
    assert 0 <= w.duration_h <= 1 and w.count == 1


def cs(hours, values):
    return ChangeSeries("x", np.asarray(hours), np.asarray(values, dtype=float), 1.0)


def test_network_aggregate_examples():
    agg = network_aggregate([cs([5], [-10.0]), cs([5], [-20.0])])
    assert agg.hours.tolist() == [5] and agg.mean.tolist() == [-15.0] and agg.contributors.tolist() == [2]
    single = network_aggregate([cs([1, 2, 4], [-1.0, -2.0, -3.0])])
    assert single.hours.tolist() == [1, 2, 4] and single.mean.tolist() == [-1.0, -2.0, -3.0]
    zero = network_aggregate([cs([0, 1], [0.0, 0.0]), cs([0, 1], [0.0, 0.0])])
    assert zero.mean.tolist() == [0.0, 0.0]
    assert network_aggregate([]).hours.size == 0


def test_network_aggregate_omits_empty_hours():
    agg = network_aggregate([cs([0, 3], [-1.0, -5.0]), cs([3, 4], [-3.0, math.nan])])
    assert agg.hours.tolist() == [0, 3]
    assert agg.mean.tolist() == [-1.0, -4.0]
    assert agg.contributors.tolist() == [1, 2]
