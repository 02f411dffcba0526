"""Speedup tables from per-run elapsed times.

Speedup is elapsed(baseline) / elapsed(k), baseline being the smallest
process count unless stated. CSV output keeps full float precision; the
display formatter rounds to two decimals, so a printed 2.56 can
correspond to a stored 2.5667.
"""

import csv
import io
from dataclasses import dataclass
from pathlib import Path


class MissingBaseline(ValueError):
    """No baseline row to normalize against."""


@dataclass(frozen=True)
class SpeedupRow:
    nppn: int
    total_elapsed_s: float
    speedup: float
    gpu_load_min: float | None = None
    gpu_load_avg: float | None = None
    gpu_load_max: float | None = None
    gpu_mem_mib_min: float | None = None
    gpu_mem_mib_avg: float | None = None
    gpu_mem_mib_max: float | None = None
    failures: int = 0


def compute_speedup(elapsed_by_nppn: dict, baseline: int | None = None) -> list[SpeedupRow]:
    """Rows sorted by nppn, normalized to the baseline's elapsed time."""
    if not elapsed_by_nppn:
        raise MissingBaseline("no runs to compare")
    if baseline is None:
        baseline = min(elapsed_by_nppn)
    if baseline not in elapsed_by_nppn:
        raise MissingBaseline(f"baseline nppn={baseline} has no run")
    base = float(elapsed_by_nppn[baseline])
    rows = []
    for nppn in sorted(elapsed_by_nppn):
        elapsed = float(elapsed_by_nppn[nppn])
        if elapsed <= 0:
            raise ValueError(f"nppn={nppn}: elapsed must be positive, got {elapsed}")
        rows.append(SpeedupRow(nppn=nppn, total_elapsed_s=elapsed, speedup=base / elapsed))
    return rows


_CSV_FIELDS = (
    "nppn",
    "total_elapsed_s",
    "speedup",
    "gpu_load_min",
    "gpu_load_avg",
    "gpu_load_max",
    "gpu_mem_mib_min",
    "gpu_mem_mib_avg",
    "gpu_mem_mib_max",
    "failures",
)


def format_speedup_csv(rows) -> str:
    """Full-precision CSV; optional stats columns are blank when absent."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_FIELDS)
    for row in rows:
        record = []
        for name in _CSV_FIELDS:
            value = getattr(row, name)
            if value is None:
                record.append("")
            elif isinstance(value, float):
                record.append(repr(value))
            else:
                record.append(str(value))
        writer.writerow(record)
    return buf.getvalue()


def write_speedup_csv(rows, path) -> None:
    Path(path).write_text(format_speedup_csv(rows))


def format_speedup_display(rows) -> str:
    """Terminal table with speedups rounded to two decimals."""
    lines = [f"{'nppn':>6} {'elapsed_s':>14} {'speedup':>8} {'failures':>9}"]
    for row in rows:
        lines.append(
            f"{row.nppn:>6} {row.total_elapsed_s:>14.2f} {row.speedup:>8.2f} {row.failures:>9}"
        )
    return "\n".join(lines) + "\n"
