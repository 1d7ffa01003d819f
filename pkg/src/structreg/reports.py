"""Text and JSON serialisation of metric reports and energy traces.

Text documents are ``key = value`` lines under ``[metrics]`` and ``[trace]``
section headers. Numbers use the shortest decimal that round-trips, and
integral floats are written without a fractional part (``liver.dsc = 100``).
"""
from __future__ import annotations

import json
import math
import os
from typing import Iterable, List, Optional, Tuple

from .energy import TERM_NAMES, EnergyBreakdown
from .metrics import MetricsReport


class ReportError(ValueError):
    pass


def format_number(x) -> str:
    if isinstance(x, bool):
        raise TypeError("booleans are not numeric report values")
    if isinstance(x, int) or (hasattr(x, "dtype") and x.dtype.kind in "iu"):
        return str(int(x))
    x = float(x)
    if math.isfinite(x) and x.is_integer() and abs(x) < 2 ** 53:
        # keep the sign of negative zero
        return "-0" if x == 0 and math.copysign(1.0, x) < 0 else str(int(x))
    return repr(x)


def _trace_rows(trace) -> List[Tuple[int, int, EnergyBreakdown]]:
    rows = []
    for i, entry in enumerate(trace or ()):
        if isinstance(entry, EnergyBreakdown):
            rows.append((0, i, entry))
        else:
            rows.append((int(entry.level), int(entry.iteration), entry.energy))
    return rows


def _energy_items(e: EnergyBreakdown):
    return list(e.as_dict().items())


def render_text(report: Optional[MetricsReport] = None, trace: Iterable = ()) -> str:
    lines = ["[metrics]"]
    if report is not None:
        lines += [f"{k} = {format_number(v)}" for k, v in report.as_flat().items()]
    lines.append("[trace]")
    for i, (level, it, e) in enumerate(_trace_rows(trace)):
        lines.append(f"trace.{i}.level = {level}")
        lines.append(f"trace.{i}.iteration = {it}")
        lines += [f"trace.{i}.{k} = {format_number(v)}" for k, v in _energy_items(e)]
    return "\n".join(lines) + "\n"


def render_json(report: Optional[MetricsReport] = None, trace: Iterable = ()) -> str:
    doc = {
        "metrics": {} if report is None else report.as_flat(),
        "trace": [dict(level=level, iteration=it, **dict(_energy_items(e)))
                  for level, it, e in _trace_rows(trace)],
    }
    return json.dumps(doc, indent=2) + "\n"


def _energy_from(d: dict) -> EnergyBreakdown:
    kw = {("is_" if k == "is" else k): float(d[k]) for k in TERM_NAMES}
    return EnergyBreakdown(**kw, total=float(d["total"]))


class _Entry:
    """Lightweight trace row returned by the parsers."""

    __slots__ = ("level", "iteration", "energy")

    def __init__(self, level, iteration, energy):
        self.level, self.iteration, self.energy = level, iteration, energy

    def __eq__(self, other):
        return (self.level, self.iteration, self.energy) == \
            (other.level, other.iteration, other.energy)

    def __repr__(self):
        return f"TraceRow(level={self.level}, iteration={self.iteration}, energy={self.energy})"


def parse_text(text: str):
    """Inverse of :func:`render_text`: ``(MetricsReport, [trace rows])``."""
    section = None
    flat, rows = {}, {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line in ("[metrics]", "[trace]"):
            section = line[1:-1]
            continue
        key, sep, value = line.partition(" = ")
        if not sep or section is None:
            raise ReportError(f"line {n}: expected 'key = value' inside a section")
        if section == "metrics":
            flat[key] = value
        else:
            parts = key.split(".")
            if len(parts) != 3 or parts[0] != "trace":
                raise ReportError(f"line {n}: bad trace key {key!r}")
            rows.setdefault(int(parts[1]), {})[parts[2]] = value
    try:
        report = MetricsReport.from_flat(flat)
    except KeyError as exc:
        raise ReportError(f"unknown metric key {exc}") from None
    trace = [_Entry(int(r["level"]), int(r["iteration"]), _energy_from(r))
             for _, r in sorted(rows.items())]
    return report, trace


def parse_json(text: str):
    doc = json.loads(text)
    report = MetricsReport.from_flat(doc.get("metrics", {}))
    trace = [_Entry(int(r["level"]), int(r["iteration"]), _energy_from(r))
             for r in doc.get("trace", [])]
    return report, trace


def write_report(path, report: Optional[MetricsReport] = None, trace: Iterable = (),
                 fmt: str = "text") -> None:
    """Write a report/trace document; ``fmt`` is ``text`` or ``json``."""
    if fmt == "text":
        body = render_text(report, trace)
    elif fmt == "json":
        body = render_json(report, trace)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(os.fspath(path), "w", encoding="utf-8") as f:
        f.write(body)


def read_report(path, fmt: Optional[str] = None):
    """Parse a report file; the format is guessed from the suffix when not given."""
    path = os.fspath(path)
    if fmt is None:
        fmt = "json" if path.endswith(".json") else "text"
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return parse_json(text) if fmt == "json" else parse_text(text)
