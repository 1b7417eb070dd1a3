"""Benchmark report rows and their CSV / JSON encodings.

Floats are written to CSV with ``%.16e``, which round-trips every double, so a
CSV and a JSON emission of one run parse back to identical values.
"""

import csv
import io
import json
from dataclasses import asdict, dataclass, fields

from .core import KernelCounters
from .perfmodel import kernel_metrics


@dataclass
class BenchReportRow:
    kernel: str
    terms: int
    items: int
    kernel_seconds: float
    reduction_seconds: float | None
    setup_seconds: float
    gops: float
    gbps: float
    items_per_second: float
    max_rel_error: float | None
    threads: int
    precision: str

    @classmethod
    def from_counters(cls, kernel, terms, items, counters: KernelCounters, kernel_seconds,
                      setup_seconds, threads, precision, reduction_seconds=None,
                      max_rel_error=None):
        """Rates are taken over ``kernel_seconds`` so ``items_per_second * kernel_seconds == items``."""
        m = kernel_metrics(counters, items, elapsed=max(kernel_seconds, 1e-12))
        return cls(
            kernel, int(terms), int(items), float(kernel_seconds),
            None if reduction_seconds is None else float(reduction_seconds),
            float(setup_seconds), m["gops"], m["gbps"], m["items_per_second"],
            None if max_rel_error is None else float(max_rel_error),
            int(threads), precision,
        )


FIELDS = [f.name for f in fields(BenchReportRow)]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "%.16e" % v
    return str(v)


def to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        w.writerow([_cell(getattr(r, f)) for f in FIELDS])
    return buf.getvalue()


def to_json(rows, config, version):
    doc = {"config": config, "rows": [asdict(r) for r in rows], "library_version": version}
    return json.dumps(doc, indent=2) + "\n"


def parse_csv(text):
    """Read a CSV report back into dictionaries with numeric fields converted."""
    types = {f.name: f.type for f in fields(BenchReportRow)}
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in rec.items():
            t = types[k]
            if v == "":
                row[k] = None
            elif t is int:
                row[k] = int(v)
            elif t is str:
                row[k] = v
            else:
                row[k] = float(v)
        out.append(row)
    return out
