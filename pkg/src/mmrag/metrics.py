"""Append-only run reports: newline-delimited JSON records plus a summary.

Wall-clock values live in their own field so byte-level comparisons can
strip them.
"""

from __future__ import annotations

import json
import time
from pathlib import Path


class MetricsReport:
    """One report per stage or evaluation; records are appended in order
    and written as one JSON object per line."""

    def __init__(self, stage: str, seed: int):
        self.stage = stage
        self.seed = seed
        self.records: list[dict] = []
        self._t0 = time.perf_counter()

    def add(self, kind: str, **payload) -> dict:
        rec = {"stage": self.stage, "seed": self.seed, "kind": kind, **payload}
        self.records.append(rec)
        return rec

    def add_series(self, kind: str, series: list[dict]) -> None:
        for row in series:
            self.add(kind, **row)

    def finalize(self, **final_metrics) -> dict:
        return self.add("final", wall_clock=time.perf_counter() - self._t0,
                        **final_metrics)

    def write(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path

    def final(self) -> dict:
        for rec in reversed(self.records):
            if rec.get("kind") == "final":
                return rec
        return {}


def read_records(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def strip_wall_clock(records: list[dict]) -> list[dict]:
    return [{k: v for k, v in rec.items() if k != "wall_clock"}
            for rec in records]
