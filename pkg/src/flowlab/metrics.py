"""Per-step run records and their CSV form."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

COLUMNS = ("step", "loss", "residual", "grad_norm", "coherence", "nfe", "target", "wall_ms")
TIMING_COLUMNS = ("wall_ms",)


def fmt(value) -> str:
    """Lossless text for a cell; missing values are empty."""
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def _parse(name, text):
    if text == "":
        return None
    if name in ("step", "nfe"):
        return int(text)
    if name == "loss":
        return text
    return float(text)


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add_row(self, **row) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("metric rows must be strictly increasing in step")
        self.rows.append({c: row.get(c) for c in COLUMNS})

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self, timing: bool = True) -> str:
        cols = COLUMNS if timing else tuple(c for c in COLUMNS if c not in TIMING_COLUMNS)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([fmt(r[c]) for c in cols])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunMetrics":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        out = cls()
        for rec in reader:
            out.add_row(**{name: _parse(name, cell) for name, cell in zip(header, rec)})
        return out

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("metric", "value"))
        for k in sorted(self.summary):
            w.writerow((k, fmt(self.summary[k])))
        return buf.getvalue()

    def write(self, directory, timing: bool = True) -> None:
        d = Path(directory)
        (d / "metrics.csv").write_text(self.to_csv(timing))
        (d / "summary.csv").write_text(self.summary_csv())


def strip_timing(csv_text: str) -> str:
    """Drop wall-clock columns so runs can be compared byte-for-byte."""
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        return csv_text
    keep = [i for i, name in enumerate(rows[0]) if name not in TIMING_COLUMNS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([r[i] for i in keep])
    return buf.getvalue()
