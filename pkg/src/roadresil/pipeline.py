"""Stage orchestration over a workspace.

Stages run in a fixed order and each persists CSV artifacts:

========  ==========================================================
ingest    ``links.csv``, ``speeds.csv``, ``reports.csv``
conflate  ``segments.csv`` (one row per TMC code)
match     ``matches.csv``
baseline  ``baseline_<event>.csv``
metrics   ``metrics_<event>.csv``
severity  ``ups_<event>.csv``, ``intensity_<event>.csv``,
          ``window_summary.csv``, ``network_series.csv``
ttest     ``ttest_<event>.csv``
gam       ``gam_<response>_<event>.csv``, ``gam_<response>_<event>_smooth.csv``
report    ``summary.txt``
========  ==========================================================

A stage whose inputs, parameters and outputs still match the manifest is
skipped. A failing stage is recorded as stale together with everything
downstream of it.
"""
from __future__ import annotations

import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from roadresil import __version__
from roadresil.core import (
    EventReport,
    EventType,
    HOURS_PER_WEEK,
    REFERENCE_LEVELS,
    BaselineProfile,
    SpeedSeries,
    ValidationError,
    format_hour,
    to_hour,
)
from roadresil.gam import GamSpec, LinearTerm, SmoothTerm, TensorTerm, fit_gam
from roadresil.gam.fit import Design
from roadresil.gam.summary import CI_NOTE, SMOOTH_COLUMNS, SUMMARY_COLUMNS, smooth_curves, summarize_fit
from roadresil.ingest import (
    LINK_COLUMNS,
    ParseError,
    conflate_by_tmc,
    link_rows,
    links_from_table,
    parse_links,
    parse_reports,
    parse_speeds,
)
from roadresil.matching import MATCH_COLUMNS, failure_counts, match_all, match_rows
from roadresil.resilience import (
    METRIC_COLUMNS,
    MIN_CELL_OBS,
    MIN_ELIGIBLE,
    EventWindowConfig,
    build_baseline,
    compute_metrics,
    detect_window,
    relative_change,
)
from roadresil.severity import classify_hours, network_aggregate, report_window, ups
from roadresil.stats import VIF_LIMIT, forward_stepwise_aic, vif, welch_ttest
from roadresil.workspace import Workspace, artifact_meta, read_artifact, write_artifact

logger = logging.getLogger(__name__)

STAGES = ("ingest", "conflate", "match", "baseline", "metrics", "severity", "ttest", "gam", "report")
RESPONSE_COLUMNS = {"duration": "duration_h", "change": "change_pct", "auc": "auc_pct_h"}


class ConfigError(ValueError):
    """Invalid or incomplete pipeline configuration."""


class StageError(RuntimeError):
    """A stage failed; ``stage`` names it and ``cause`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


# --- configuration ---------------------------------------------------------


@dataclass(frozen=True)
class EventSpec:
    name: str
    type: EventType
    span: tuple[int, int]


@dataclass(frozen=True)
class ModelSpec:
    response: str
    family: str
    linear: tuple[LinearTerm, ...] = ()
    smooth: tuple[SmoothTerm, ...] = ()
    tensor: Optional[TensorTerm] = None
    lambda_grid: tuple[float, ...] = tuple(float(v) for v in np.logspace(-4, 8, 25))
    select: bool = True
    subset: str = "affected"


@dataclass(frozen=True)
class PipelineConfig:
    workspace: Path
    inputs: dict
    events: tuple[EventSpec, ...]
    timezone: str = "UTC"
    threshold: float = -1.0
    gap_hours: int = 2
    lookback_days: int = 30
    distance_m: float = 10.0
    bearing_tolerance_deg: float = 30.0
    models: tuple[ModelSpec, ...] = ()
    jobs: int = 0

    def __post_init__(self):
        if not (isinstance(self.threshold, (int, float)) and math.isfinite(self.threshold) and self.threshold < 0):
            raise ConfigError(f"threshold must be a finite negative number, got {self.threshold!r}")
        if int(self.gap_hours) != self.gap_hours or self.gap_hours < 0:
            raise ConfigError("gap_hours must be a non-negative integer")
        if int(self.lookback_days) != self.lookback_days or self.lookback_days <= 0:
            raise ConfigError("lookback_days must be a positive integer")
        if not self.distance_m > 0 or not self.bearing_tolerance_deg > 0:
            raise ConfigError("matching gates must be positive")
        if not self.events:
            raise ConfigError("at least one event is required")
        names = [e.name for e in self.events]
        if len(set(names)) != len(names):
            raise ConfigError("event names must be unique")
        for e in self.events:
            if not re.fullmatch(r"[A-Za-z0-9_.-]+", e.name):
                raise ConfigError(f"event name {e.name!r} must be a plain file-name token")
        for key in ("links", "speeds", "reports"):
            if key not in self.inputs:
                raise ConfigError(f"inputs.{key} is required")

    @property
    def n_jobs(self) -> int:
        return self.jobs if self.jobs > 0 else (os.cpu_count() or 1)

    def event(self, name: str) -> EventSpec:
        for e in self.events:
            if e.name == name:
                return e
        raise ConfigError(f"unknown event {name!r}")

    def window_config(self, event: EventSpec) -> EventWindowConfig:
        return EventWindowConfig(event.span, self.threshold, int(self.gap_hours), int(self.lookback_days))

    @classmethod
    def from_yaml(cls, path, **overrides) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw, base=path.parent, **overrides)

    @classmethod
    def from_dict(cls, raw: dict, base=".", **overrides) -> "PipelineConfig":
        base = Path(base)
        try:
            tz = raw.get("timezone", "UTC")
            params = raw.get("params", {}) or {}
            matching = raw.get("matching", {}) or {}
            events = []
            for ev in raw.get("events", []) or []:
                span = (to_hour(ev["start"], tz), to_hour(ev["end"], tz))
                if span[1] < span[0]:
                    raise ConfigError(f"event {ev['name']}: end precedes start")
                events.append(EventSpec(str(ev["name"]), EventType(ev["type"]), span))
            models = tuple(_model_spec(m) for m in raw.get("models", []) or [])
            override = overrides.pop("workspace", None)
            values = dict(
                workspace=Path(override) if override else base / raw.get("workspace", "workspace"),
                inputs={k: str(base / v) for k, v in (raw.get("inputs", {}) or {}).items()},
                events=tuple(events),
                timezone=tz,
                threshold=float(params.get("threshold", -1.0)),
                gap_hours=params.get("gap_hours", 2),
                lookback_days=params.get("lookback_days", 30),
                distance_m=float(matching.get("distance_m", 10.0)),
                bearing_tolerance_deg=float(matching.get("bearing_tolerance_deg", 30.0)),
                models=models,
                jobs=int(raw.get("jobs", 0) or 0),
            )
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc!r}") from exc
        values.update({k: v for k, v in overrides.items() if v is not None})
        if isinstance(values["workspace"], str):
            values["workspace"] = Path(values["workspace"])
        return cls(**values)


def _model_spec(m: dict) -> ModelSpec:
    response = m["response"]
    if response not in RESPONSE_COLUMNS:
        raise ConfigError(f"model response must be one of {sorted(RESPONSE_COLUMNS)}, got {response!r}")
    grid = m.get("lambda_grid")
    if isinstance(grid, dict):
        grid = np.logspace(math.log10(float(grid["min"])), math.log10(float(grid["max"])), int(grid["n"]))
    tensor = m.get("tensor")
    subset = m.get("subset", "affected")
    if subset not in ("affected", "all"):
        raise ConfigError("model subset must be 'affected' or 'all'")
    spec = ModelSpec(
        response=response,
        family=m.get("family", "GaussianIdentity"),
        linear=tuple(LinearTerm(t["variable"], t.get("encoding", "numeric"), t.get("reference")) for t in m.get("linear", [])),
        smooth=tuple(SmoothTerm(t["variable"], int(t.get("k", 10))) for t in m.get("smooth", [])),
        tensor=TensorTerm(tuple(tensor.get("variables", ("lat", "lon"))), tuple(tensor.get("k", (5, 5)))) if tensor else None,
        select=bool(m.get("select", True)),
        subset=subset,
    )
    if grid is not None:
        spec = replace(spec, lambda_grid=tuple(float(v) for v in grid))
    GamSpec(RESPONSE_COLUMNS[response], spec.family, lambda_grid=spec.lambda_grid)  # validates family and grid
    return spec


# --- artifact readers ------------------------------------------------------

SPEED_COLUMNS = ["segment_id", "timestamp", "speed_mph"]
REPORT_COLUMNS = [
    "report_id", "subtype", "event_type", "lat", "lon", "start_s", "end_s", "road_name", "direction", "reliability",
]
BASELINE_COLUMNS = ["link_id", "table", "cell", "mean_speed", "n_obs"]


def _speed_rows(series: Sequence[SpeedSeries]):
    for s in sorted(series, key=lambda s: s.link_id):
        for h, v in zip(s.hours.tolist(), s.speeds.tolist()):
            yield [s.link_id, format_hour(h), v]


def load_speeds(path) -> list[SpeedSeries]:
    df = read_artifact(path, dtype={"segment_id": str, "timestamp": str})
    hours = pd.to_datetime(df["timestamp"], format="%Y-%m-%dT%H:%M").to_numpy().astype("datetime64[h]").astype(np.int64)
    ids = df["segment_id"].to_numpy()
    speeds = df["speed_mph"].to_numpy(dtype=float)
    out = []
    if len(ids):
        cuts = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        for lo, hi in zip(np.r_[0, cuts], np.r_[cuts, len(ids)]):
            out.append(SpeedSeries(str(ids[lo]), hours[lo:hi], speeds[lo:hi]))
    return out


def _report_rows(reports: Sequence[EventReport]):
    for r in sorted(reports, key=lambda r: r.report_id):
        yield [
            r.report_id, r.raw_subtype, r.event_type.value, r.location[0], r.location[1], r.start_time, r.end_time,
            r.road_name, r.direction_tag, r.reliability,
        ]


def load_reports(path) -> list[EventReport]:
    df = read_artifact(path, dtype=str)
    out = []
    for row in df.to_dict("records"):
        out.append(
            EventReport(
                report_id=row["report_id"],
                raw_subtype=row["subtype"],
                location=(float(row["lat"]), float(row["lon"])),
                start_time=int(row["start_s"]),
                end_time=int(row["end_s"]),
                road_name=row["road_name"] if isinstance(row["road_name"], str) else "",
                reliability=float(row["reliability"]),
                direction_tag=row["direction"] if isinstance(row["direction"], str) else None,
            )
        )
    return out


def _baseline_rows(profiles: Sequence[BaselineProfile]):
    for p in sorted(profiles, key=lambda p: p.link_id):
        for table, means, counts in (("how", p.how_mean, p.how_n), ("hod", p.hod_mean, p.hod_n)):
            for cell in np.flatnonzero(counts > 0).tolist():
                yield [p.link_id, table, cell, float(means[cell]), int(counts[cell])]


def load_baselines(path) -> dict[str, BaselineProfile]:
    df = read_artifact(path, dtype={"link_id": str, "table": str})
    out = {}
    for link_id, g in df.groupby("link_id", sort=True):
        tabs = {}
        for table, size in (("how", HOURS_PER_WEEK), ("hod", 24)):
            sub = g[g["table"] == table]
            means = np.full(size, np.nan)
            counts = np.zeros(size, dtype=np.int64)
            cells = sub["cell"].to_numpy(dtype=np.int64)
            means[cells] = sub["mean_speed"].to_numpy(dtype=float)
            counts[cells] = sub["n_obs"].to_numpy(dtype=np.int64)
            tabs[table] = (means, counts)
        n = int(tabs["hod"][1].sum())
        out[str(link_id)] = BaselineProfile(
            str(link_id), tabs["how"][0], tabs["how"][1], tabs["hod"][0], tabs["hod"][1], n, MIN_CELL_OBS, n < MIN_ELIGIBLE
        )
    return out


def _build_profile(series: SpeedSeries, cfg: EventWindowConfig, exclude) -> BaselineProfile:
    return build_baseline(series, cfg.event_span, cfg.baseline_lookback, exclude)


# --- the orchestrator ------------------------------------------------------


@dataclass
class Pipeline:
    config: PipelineConfig
    events: Optional[Sequence[str]] = None  # restrict to these event names
    ws: Workspace = field(init=False)
    ran: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        self.ws = Workspace.open(self.config.workspace, self.config.timezone)
        if self.events:
            for name in self.events:
                self.config.event(name)

    # helpers
    @property
    def active_events(self) -> list[EventSpec]:
        if not self.events:
            return list(self.config.events)
        return [self.config.event(n) for n in self.events]

    def _p(self, name: str) -> Path:
        return self.ws.path(name)

    def _require(self, names: Sequence[str], stage: str) -> dict:
        paths = {}
        for n in names:
            p = self._p(n)
            if not p.exists():
                raise StageError(stage, FileNotFoundError(f"missing artifact {n}; run the upstream stage first"))
            paths[n] = p
        return paths

    def _map(self, fn: Callable, items: Sequence):
        """Ordered map, threaded when more than one job is configured."""
        if self.config.n_jobs <= 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.config.n_jobs) as pool:
            return list(pool.map(fn, items))

    def _event_params(self) -> dict:
        return {e.name: {"type": e.type.value, "span": [format_hour(e.span[0]), format_hour(e.span[1])]} for e in self.active_events}

    def _run_stage(self, stage: str, inputs: dict, params: dict, body: Callable[[], dict]):
        hashes = self.ws.hash_inputs(inputs)
        params = {"version": __version__, **params}
        if self.ws.is_current(stage, hashes, params):
            logger.info("stage %s up to date, skipped", stage)
            self.skipped.append(stage)
            return
        logger.info("stage %s running", stage)
        try:
            outputs = body()
        except StageError:
            self._fail(stage, hashes, params)
            raise
        except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
            self._fail(stage, hashes, params)
            raise StageError(stage, exc) from exc
        self.ws.record(stage, hashes, params, outputs)
        self.ran.append(stage)

    def _fail(self, stage: str, hashes: dict, params: dict):
        from roadresil.workspace import StageRecord

        rec = self.ws.stages.get(stage)
        self.ws.stages[stage] = StageRecord(inputs=hashes, params=params, outputs=rec.outputs if rec else {}, stale=True)
        downstream = STAGES[STAGES.index(stage) + 1 :]
        self.ws.mark_stale(downstream)

    # stages
    def ingest(self):
        cfg = self.config
        inputs = {k: cfg.inputs[k] for k in ("links", "speeds", "reports")}
        for k, p in inputs.items():
            if not Path(p).exists():
                raise StageError("ingest", ParseError(str(p), f"input {k} not found"))

        def body():
            links = parse_links(inputs["links"])
            series, stats = parse_speeds(inputs["speeds"], tz=cfg.timezone)
            reports = parse_reports(inputs["reports"], tz=cfg.timezone)
            return {
                "links.csv": write_artifact(self._p("links.csv"), "links", LINK_COLUMNS, link_rows(links)),
                "speeds.csv": write_artifact(
                    self._p("speeds.csv"), "speeds", SPEED_COLUMNS, _speed_rows(series),
                    meta={"rows_in": stats.rows, "duplicates": stats.duplicates, "dropped_nonpositive": stats.dropped_nonpositive},
                ),
                "reports.csv": write_artifact(self._p("reports.csv"), "reports", REPORT_COLUMNS, _report_rows(reports)),
            }

        self._run_stage("ingest", inputs, {"timezone": cfg.timezone}, body)

    def conflate(self):
        inputs = self._require(["links.csv"], "conflate")

        def body():
            links = links_from_table(inputs["links.csv"])
            if links and all(l.tmc_code for l in links):
                links = conflate_by_tmc(links)
            return {"segments.csv": write_artifact(self._p("segments.csv"), "segments", LINK_COLUMNS, link_rows(links))}

        self._run_stage("conflate", inputs, {}, body)

    def match(self):
        cfg = self.config
        inputs = self._require(["segments.csv", "reports.csv"], "match")

        def body():
            links = links_from_table(inputs["segments.csv"])
            reports = load_reports(inputs["reports.csv"])
            results, rate = match_all(reports, links, cfg.distance_m, cfg.bearing_tolerance_deg)
            meta = {"match_rate": rate, "matched": sum(r.matched for r in results), "total": len(results)}
            meta.update({f"failures_{k}": v for k, v in failure_counts(results).items()})
            return {"matches.csv": write_artifact(self._p("matches.csv"), "matches", MATCH_COLUMNS, match_rows(results), meta)}

        params = {"distance_m": cfg.distance_m, "bearing_tolerance_deg": cfg.bearing_tolerance_deg}
        self._run_stage("match", inputs, params, body)

    def _exclusions(self, event: EventSpec) -> list[tuple[int, int]]:
        return [e.span for e in self.config.events if e.name != event.name]

    def baseline(self):
        cfg = self.config
        inputs = self._require(["speeds.csv"], "baseline")

        def body():
            series = load_speeds(inputs["speeds.csv"])
            out = {}
            for ev in self.active_events:
                wcfg = cfg.window_config(ev)
                excl = self._exclusions(ev)
                profiles = self._map(lambda s: _build_profile(s, wcfg, excl), series)
                name = f"baseline_{ev.name}.csv"
                out[name] = write_artifact(self._p(name), "baseline", BASELINE_COLUMNS, _baseline_rows(profiles))
            return out

        params = {"lookback_days": cfg.lookback_days, "events": self._event_params(),
                  "exclusions": {e.name: [list(s) for s in self._exclusions(e)] for e in self.active_events}}
        self._run_stage("baseline", inputs, params, body)

    def metrics(self):
        cfg = self.config
        names = ["speeds.csv"] + [f"baseline_{e.name}.csv" for e in self.active_events]
        inputs = self._require(names, "metrics")

        def body():
            series = load_speeds(inputs["speeds.csv"])
            out = {}
            for ev in self.active_events:
                wcfg = cfg.window_config(ev)
                profiles = load_baselines(inputs[f"baseline_{ev.name}.csv"])

                def one(s: SpeedSeries):
                    prof = profiles.get(s.link_id)
                    if prof is None or prof.insufficient:
                        return [s.link_id, None, None, 0.0, 0.0, 0.0, False, False, True]
                    change = relative_change(s, prof)
                    window, low = detect_window(change, wcfg)
                    m = compute_metrics(change, window, wcfg, ev.name, low)
                    a, b = (format_hour(m.window[0]), format_hour(m.window[1])) if m.window else (None, None)
                    return [s.link_id, a, b, m.duration_hours, m.change_pct, m.auc_pct_hours, m.affected, m.low_coverage, False]

                rows = sorted(self._map(one, series), key=lambda r: r[0])
                name = f"metrics_{ev.name}.csv"
                out[name] = write_artifact(self._p(name), "metrics", METRIC_COLUMNS, rows, meta={"event": ev.name})
            return out

        params = {"threshold": cfg.threshold, "gap_hours": cfg.gap_hours, "events": self._event_params()}
        self._run_stage("metrics", inputs, params, body)

    def _event_reports(self, reports: Sequence[EventReport], ev: EventSpec) -> list[EventReport]:
        lo, hi = self.config.window_config(ev).search_span
        return [r for r in reports if r.event_type == ev.type and lo <= r.start_time // 3600 <= hi]

    def severity(self):
        cfg = self.config
        events = self.active_events
        names = ["segments.csv", "reports.csv", "matches.csv", "speeds.csv"] + [f"baseline_{e.name}.csv" for e in events]
        inputs = self._require(names, "severity")

        def body():
            links = {l.link_id: l for l in links_from_table(inputs["segments.csv"])}
            reports = load_reports(inputs["reports.csv"])
            matches = read_artifact(inputs["matches.csv"], dtype=str)
            matched = {r: l for r, l in zip(matches["report_id"], matches["link_id"]) if isinstance(l, str)}
            series = load_speeds(inputs["speeds.csv"])
            hours_all = np.concatenate([s.hours for s in series]) if series else np.empty(0, np.int64)
            span = (int(hours_all.min()), int(hours_all.max())) if hours_all.size else None
            out = {}
            window_rows, network_rows = [], []
            for ev in events:
                ev_reports = self._event_reports(reports, ev)
                by_link: dict[str, list] = {}
                for r in ev_reports:
                    if r.report_id in matched:
                        by_link.setdefault(matched[r.report_id], []).append(r)
                ups_rows = []
                for lid in sorted(links):
                    rec = ups(links[lid], by_link.get(lid, []), ev.type)
                    ups_rows.append([lid, ev.type.value, rec.ups, rec.report_count])
                name = f"ups_{ev.name}.csv"
                out[name] = write_artifact(self._p(name), "ups", ["link_id", "event_type", "ups", "report_count"], ups_rows)

                typed = [r for r in reports if r.event_type == ev.type]
                labels = classify_hours(typed, span, [ev.type]) if span else []
                name = f"intensity_{ev.name}.csv"
                out[name] = write_artifact(
                    self._p(name), "intensity", ["timestamp", "event_type", "report_count", "label"],
                    ([format_hour(l.hour), l.event_type.value, l.report_count, l.label.value] for l in labels),
                )

                win = report_window(ev_reports)
                window_rows.append(
                    [ev.name, ev.type.value, "reports"]
                    + ([format_hour(win.first), format_hour(win.last), win.count, win.duration_h] if win else [None, None, 0, None])
                )

                profiles = load_baselines(inputs[f"baseline_{ev.name}.csv"])

                def change(s):
                    prof = profiles.get(s.link_id)
                    return None if prof is None or prof.insufficient else relative_change(s, prof)

                changes = [c for c in self._map(change, series) if c is not None]
                agg = network_aggregate(changes)
                for h, m, n in zip(agg.hours.tolist(), agg.mean.tolist(), agg.contributors.tolist()):
                    network_rows.append([ev.name, format_hour(h), m, n])

            out["window_summary.csv"] = write_artifact(
                self._p("window_summary.csv"), "window_summary",
                ["event", "event_type", "source", "first", "last", "count", "duration_h"], window_rows,
            )
            out["network_series.csv"] = write_artifact(
                self._p("network_series.csv"), "network_series", ["event", "timestamp", "mean_change_pct", "contributors"],
                network_rows,
            )
            return out

        self._run_stage("severity", inputs, {"events": self._event_params(), "lookback_days": cfg.lookback_days}, body)

    def ttest(self):
        events = self.active_events
        names = ["network_series.csv"] + [f"intensity_{e.name}.csv" for e in events]
        inputs = self._require(names, "ttest")
        header = ["event_type", "level", "n_hours", "mean_change", "sd_change", "diff", "ci_lo", "ci_hi", "t", "df", "p_value", "stars"]

        def body():
            net = read_artifact(inputs["network_series.csv"], dtype={"event": str, "timestamp": str})
            out = {}
            for ev in events:
                lab = read_artifact(inputs[f"intensity_{ev.name}.csv"], dtype={"timestamp": str, "label": str})
                series = net[net["event"] == ev.name].merge(lab, on="timestamp", how="inner")
                groups = {lv: series.loc[series["label"] == lv, "mean_change_pct"].to_numpy(float) for lv in ("None", "Light", "Heavy")}
                base = groups["None"]
                rows = [[ev.type.value, "None", base.size, _mean(base), _sd(base), None, None, None, None, None, None, ""]]
                for lv in ("Light", "Heavy"):
                    g = groups[lv]
                    row = [ev.type.value, lv, g.size, _mean(g), _sd(g)]
                    try:
                        t = welch_ttest(g, base, (lv, "None"))
                        row += [t.diff, t.ci95[0], t.ci95[1], t.t_stat, t.df, t.p_value, t.significance_code]
                    except ValueError as exc:
                        logger.warning("ttest %s %s vs None skipped: %s", ev.name, lv, exc)
                        row += [None] * 6 + [""]
                    rows.append(row)
                name = f"ttest_{ev.name}.csv"
                out[name] = write_artifact(self._p(name), "ttest", header, rows, meta={"test": "welch, t-based 95% CI"})
            return out

        self._run_stage("ttest", inputs, {"events": self._event_params()}, body)

    def gam(self):
        events = self.active_events
        names = ["segments.csv"]
        for e in events:
            names += [f"metrics_{e.name}.csv", f"ups_{e.name}.csv", f"baseline_{e.name}.csv"]
        inputs = self._require(names, "gam")
        models = self.config.models

        def body():
            links = links_from_table(inputs["segments.csv"])
            out = {}
            for ev in events:
                data = model_frame(
                    links,
                    read_artifact(inputs[f"metrics_{ev.name}.csv"], dtype={"link_id": str}),
                    read_artifact(inputs[f"ups_{ev.name}.csv"], dtype={"link_id": str}),
                    load_baselines(inputs[f"baseline_{ev.name}.csv"]),
                )
                for spec in models:
                    rows, curves, meta = fit_model(spec, data)
                    stem = f"gam_{spec.response}_{ev.name}"
                    out[f"{stem}.csv"] = write_artifact(self._p(f"{stem}.csv"), "gam", SUMMARY_COLUMNS, rows, meta)
                    out[f"{stem}_smooth.csv"] = write_artifact(self._p(f"{stem}_smooth.csv"), "gam_smooth", SMOOTH_COLUMNS, curves)
            return out

        params = {"events": self._event_params(), "models": [_model_params(m) for m in models]}
        self._run_stage("gam", inputs, params, body)

    def report(self):
        events = self.active_events
        names = ["matches.csv", "window_summary.csv"]
        for e in events:
            names += [f"metrics_{e.name}.csv", f"ttest_{e.name}.csv"]
            names += [f"gam_{m.response}_{e.name}.csv" for m in self.config.models]
        inputs = self._require(names, "report")

        def body():
            text = render_summary(self.ws, events, self.config.models)
            path = self._p("summary.txt")
            path.write_text(text)
            return {"summary.txt": text.count("\n")}

        self._run_stage("report", inputs, {"events": self._event_params()}, body)

    def run(self, stages: Sequence[str] = STAGES):
        for s in stages:
            getattr(self, s)()
        return self.ws


def _mean(x):
    return float(np.mean(x)) if x.size else None


def _sd(x):
    return float(np.std(x, ddof=1)) if x.size > 1 else None


def _model_params(m: ModelSpec) -> dict:
    return {
        "response": m.response,
        "family": m.family,
        "linear": [[t.variable, t.encoding, t.reference] for t in m.linear],
        "smooth": [[t.variable, t.k] for t in m.smooth],
        "tensor": [list(m.tensor.variables), list(m.tensor.k)] if m.tensor else None,
        "lambda_grid": list(m.lambda_grid),
        "select": m.select,
        "subset": m.subset,
    }


# --- modelling -------------------------------------------------------------


def model_frame(links, metrics: pd.DataFrame, ups_table: pd.DataFrame, baselines: dict) -> pd.DataFrame:
    """One row per link: attributes, UPS, normal speed, location and metrics."""
    rows = []
    for l in sorted(links, key=lambda l: l.link_id):
        prof = baselines.get(l.link_id)
        if prof is not None and prof.hod_n.sum() > 0:
            ok = prof.hod_n > 0
            speed = float(np.sum(prof.hod_mean[ok] * prof.hod_n[ok]) / prof.hod_n[ok].sum())
        else:
            speed = float("nan")
        lat, lon = l.midpoint
        rows.append(
            dict(
                link_id=l.link_id,
                functional_class=l.functional_class.value,
                lane_category=l.lane_category.value,
                divider=l.divider.value,
                is_intersection=str(bool(l.is_intersection)),
                is_frontage=str(bool(l.is_frontage)),
                min_altitude=l.min_altitude,
                slope=l.slope,
                length=l.length,
                speed=speed,
                lat=lat,
                lon=lon,
            )
        )
    frame = pd.DataFrame(rows)
    m = metrics[["link_id", "duration_h", "change_pct", "auc_pct_h", "affected", "baseline_insufficient"]]
    frame = frame.merge(m, on="link_id", how="inner")
    frame = frame.merge(ups_table[["link_id", "ups"]], on="link_id", how="left")
    frame["ups"] = frame["ups"].fillna(0.0)
    for c in ("affected", "baseline_insufficient"):
        frame[c] = frame[c].astype(str).str.lower() == "true"
    return frame


def _usable_terms(terms: Sequence[LinearTerm], df: pd.DataFrame) -> tuple[list[LinearTerm], list[str]]:
    """Drop linear terms that cannot be estimated on ``df``."""
    keep, dropped = [], []
    for t in terms:
        x = df[t.variable]
        if t.encoding == "numeric":
            ok = float(np.std(np.asarray(x, float), ddof=1)) > 0 if len(x) > 1 else False
        else:
            levels = set(x.astype(str))
            ref = t.reference or REFERENCE_LEVELS.get(t.variable)
            ok = len(levels) > 1 and (ref is None or ref in levels)
        (keep if ok else dropped).append(t if ok else t.variable)
    return keep, dropped


def _linear_columns(terms: Sequence[LinearTerm], df: pd.DataFrame) -> dict[str, np.ndarray]:
    """Design columns of linear terms keyed by coefficient name."""
    design = Design(GamSpec("__y", "GaussianIdentity", linear_terms=tuple(terms)), df)
    X = design.matrix(df)
    return {n: X[:, j] for j, n in enumerate(design.coef_names) if j > 0}


def fit_model(spec: ModelSpec, df: pd.DataFrame) -> tuple[list[list], list[list], dict]:
    """Select linear terms (VIF then forward AIC), fit, and tabulate."""
    response = RESPONSE_COLUMNS[spec.response]
    data = df[~df["baseline_insufficient"]]
    if spec.subset == "affected":
        data = data[data["affected"]]
    used = [t.variable for t in spec.linear] + [t.variable for t in spec.smooth]
    if spec.tensor:
        used += list(spec.tensor.variables)
    before = len(data)
    data = data.dropna(subset=list(dict.fromkeys(used + [response]))).reset_index(drop=True)
    meta = {"rows": len(data), "rows_dropped_incomplete": before - len(data), "ci": CI_NOTE}
    if spec.response == "duration":
        data[response] = data[response].round().astype(int)
    if len(data) < 10:
        raise ValidationError(f"model {spec.response}: only {len(data)} usable rows")

    terms, dropped = _usable_terms(spec.linear, data)
    extra = [["dropped", v, None, None, None, None, None, None, None, ""] for v in dropped]
    if spec.select and terms:
        cols = _linear_columns(terms, data)
        term_of = {}
        for t in terms:
            for n in cols:
                if n == t.variable or n.startswith(t.variable + "["):
                    term_of[n] = t.variable
        # drop the worst term while any column exceeds the VIF limit
        while len(cols) > 1:
            res = vif(cols)
            values = res.as_dict()
            worst = max(values, key=lambda n: (values[n], n))
            if values[worst] <= VIF_LIMIT:
                break
            var = term_of[worst]
            extra.append(["vif_removed", var, values[worst], None, None, None, None, None, None, ""])
            terms = [t for t in terms if t.variable != var]
            cols = {n: c for n, c in cols.items() if term_of[n] != var}
        if len(cols) > 1:
            for n, v in vif(cols).as_dict().items():
                extra.append(["vif", n, v, None, None, None, None, None, None, ""])
        by_name = {t.variable: t for t in terms}

        def aic_of(names):
            gs = GamSpec(response, spec.family, linear_terms=tuple(by_name[n] for n in sorted(names, key=list(by_name).index)))
            return fit_gam(gs, data).aic

        step = forward_stepwise_aic(list(by_name), aic_of)
        for added, aic in step.history:
            extra.append(["stepwise", added or "(Intercept)", aic, None, None, None, None, None, None, ""])
        terms = [t for t in terms if t.variable in step.selected]

    gs = GamSpec(
        response, spec.family, linear_terms=tuple(terms), smooth_terms=spec.smooth, tensor_term=spec.tensor,
        lambda_grid=spec.lambda_grid,
    )
    fit = fit_gam(gs, data)
    rows = [[r[c] for c in SUMMARY_COLUMNS] for r in summarize_fit(fit)]
    curves = smooth_curves(fit, data)
    return rows + extra, curves, meta


# --- human-readable summary --------------------------------------------------


def _fmt(v, digits=3):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, (float, np.floating)):
        return f"{v:.{digits}f}"
    return str(v)


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_summary(ws: Workspace, events: Sequence[EventSpec], models: Sequence[ModelSpec]) -> str:
    out = [f"roadresil {__version__} summary", ""]
    meta = artifact_meta(ws.path("matches.csv"))
    out.append(f"Report matching: {meta.get('matched', '0')} of {meta.get('total', '0')} matched (rate {meta.get('match_rate') or '-'})")
    out.append("")

    out.append("Event windows by source")
    win = read_artifact(ws.path("window_summary.csv"), dtype=str)
    out.append(_table(list(win.columns), win.itertuples(index=False)))
    out.append("")

    for ev in events:
        m = read_artifact(ws.path(f"metrics_{ev.name}.csv"), dtype={"link_id": str})
        aff = m[m["affected"].astype(str).str.lower() == "true"]
        out.append(f"Resilience metrics, event {ev.name} ({ev.type.value}): {len(aff)} of {len(m)} links affected")
        rows = []
        for col, label in (("duration_h", "Duration (h)"), ("change_pct", "Change (%)"), ("auc_pct_h", "AUC (% h)")):
            x = aff[col].to_numpy(float)
            rows.append([label, _mean(x), _sd(x), float(x.min()) if x.size else None, float(x.max()) if x.size else None])
        out.append(_table(["metric", "mean", "sd", "min", "max"], rows))
        out.append("")

        t = read_artifact(ws.path(f"ttest_{ev.name}.csv"), dtype={"event_type": str, "level": str, "stars": str})
        out.append(f"Network change by report intensity, event {ev.name}")
        rows = []
        for r in t.to_dict("records"):
            mean_sd = f"{_fmt(r['mean_change'], 2)} ({_fmt(r['sd_change'], 2)})"
            ci = f"[{_fmt(r['ci_lo'], 2)}, {_fmt(r['ci_hi'], 2)}]" if not pd.isna(r["ci_lo"]) else "-"
            rows.append([r["level"], int(r["n_hours"]), mean_sd, r["diff"], ci, r["stars"] if isinstance(r["stars"], str) else ""])
        out.append(_table(["level", "hours", "change mean (sd)", "diff vs None", "95% CI", ""], rows))
        out.append("")

        for spec in models:
            g = read_artifact(ws.path(f"gam_{spec.response}_{ev.name}.csv"), dtype={"section": str, "term": str, "stars": str})
            out.append(f"GAM {spec.response} ({spec.family}), event {ev.name}")
            par = g[g["section"] == "parametric"]
            out.append(_table(
                ["term", "estimate", "95% CI", "p", ""],
                [[r["term"], r["estimate"], f"[{_fmt(r['ci_lo'])}, {_fmt(r['ci_hi'])}]", r["p_value"],
                  r["stars"] if isinstance(r["stars"], str) else ""] for r in par.to_dict("records")],
            ))
            sm = g[g["section"] == "smooth"]
            if len(sm):
                out.append(_table(
                    ["smooth", "edf", "statistic", "p", ""],
                    [[r["term"], r["edf"], r["statistic"], r["p_value"], r["stars"] if isinstance(r["stars"], str) else ""]
                     for r in sm.to_dict("records")],
                ))
            fit = {r["term"]: r["estimate"] for r in g[g["section"] == "fit"].to_dict("records")}
            out.append(
                f"R2 (adj) {_fmt(fit.get('r2_adjusted'))}  deviance explained {_fmt(fit.get('deviance_explained'))}  "
                f"AIC {_fmt(fit.get('aic'), 1)}  n {int(fit.get('n', 0))}"
            )
            out.append("")
    out.append("Signif. codes: 0 '***' 0.001 '**' 0.01 '*' 0.05 '.' 0.1")
    out.append(f"Note: {CI_NOTE}.")
    return "\n".join(out) + "\n"


def run_pipeline(config: PipelineConfig, events: Optional[Sequence[str]] = None, stages: Sequence[str] = STAGES) -> Workspace:
    """Run ``stages`` in order; returns the workspace."""
    return Pipeline(config, events).run(stages)
