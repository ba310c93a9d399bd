"""Workspace directory, CSV artifacts and the content-addressed manifest."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def format_value(v) -> str:
    """Deterministic text form: shortest round-trip repr for floats."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return ""
        if v == 0.0:
            return "0.0"  # folds -0.0
        return repr(v)
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def render_artifact(
    schema: str, header: Sequence[str], rows: Iterable[Sequence], meta: Optional[dict] = None
) -> bytes:
    """CSV text preceded by ``# schema:`` and optional ``# key: value`` lines."""
    buf = io.StringIO()
    buf.write(f"# schema: roadresil.{schema}/v{SCHEMA_VERSION}\n")
    for k, v in (meta or {}).items():
        buf.write(f"# {k}: {format_value(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_artifact(
    path, schema: str, header: Sequence[str], rows: Iterable[Sequence], meta: Optional[dict] = None
) -> int:
    """Write a schema-tagged CSV atomically. Returns the number of data rows."""
    rows = list(rows)
    data = render_artifact(schema, header, rows, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(rows)


def read_artifact(path, **kwargs) -> pd.DataFrame:
    """Read a schema-tagged CSV written by :func:`write_artifact`."""
    skip = len(artifact_meta(path)) + 1 if artifact_schema(path) else 0
    kwargs.setdefault("keep_default_na", False)
    kwargs.setdefault("na_values", [""])
    kwargs.setdefault("float_precision", "round_trip")
    return pd.read_csv(path, skiprows=skip, **kwargs)


def artifact_schema(path) -> Optional[str]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first.startswith("# schema:"):
        return first.split(":", 1)[1].strip()
    return None


def artifact_meta(path) -> dict[str, str]:
    """``# key: value`` lines following the schema line."""
    meta = {}
    with open(path, encoding="utf-8") as fh:
        if not fh.readline().startswith("# schema:"):
            return meta
        for line in fh:
            if not line.startswith("# "):
                break
            k, _, v = line[2:].rstrip("\n").partition(": ")
            meta[k] = v
    return meta


@dataclass
class StageRecord:
    inputs: dict
    params: dict
    outputs: dict
    stale: bool = False

    def to_json(self):
        return {"inputs": self.inputs, "params": self.params, "outputs": self.outputs, "stale": self.stale}


@dataclass
class Workspace:
    """A directory holding artifacts plus ``manifest.json``.

    The manifest records, per stage, the hashes of its inputs, its parameters
    and the hash and row count of each output. A stage whose record still
    matches the files on disk is up to date and can be skipped.
    """

    root: Path
    timezone: str = "UTC"
    stages: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)

    @classmethod
    def open(cls, root, timezone: str = "UTC") -> "Workspace":
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        ws = cls(root, timezone)
        mpath = root / MANIFEST_NAME
        if mpath.exists():
            data = json.loads(mpath.read_text())
            ws.stages = {k: StageRecord(**v) for k, v in data.get("stages", {}).items()}
        return ws

    def path(self, name: str) -> Path:
        return self.root / name

    def save(self):
        data = {
            "schema_version": SCHEMA_VERSION,
            "timezone": self.timezone,
            "stages": {k: self.stages[k].to_json() for k in sorted(self.stages)},
        }
        tmp = self.root / (MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.root / MANIFEST_NAME)

    def hash_inputs(self, paths: dict) -> dict:
        return {k: file_sha256(p) for k, p in sorted(paths.items())}

    def is_current(self, stage: str, inputs: dict, params: dict) -> bool:
        rec = self.stages.get(stage)
        if rec is None or rec.stale or rec.inputs != inputs or rec.params != params:
            return False
        for name, meta in rec.outputs.items():
            p = self.path(name)
            if not p.exists() or file_sha256(p) != meta["sha256"]:
                return False
        return True

    def record(self, stage: str, inputs: dict, params: dict, outputs: dict):
        """``outputs`` maps artifact file name to row count."""
        out = {name: {"sha256": file_sha256(self.path(name)), "rows": int(rows)} for name, rows in sorted(outputs.items())}
        self.stages[stage] = StageRecord(inputs=inputs, params=params, outputs=out)
        self.save()

    def mark_stale(self, stages: Iterable[str]):
        for s in stages:
            if s in self.stages:
                self.stages[s].stale = True
        self.save()

    def outputs_of(self, stage: str) -> list[str]:
        rec = self.stages.get(stage)
        return sorted(rec.outputs) if rec else []
