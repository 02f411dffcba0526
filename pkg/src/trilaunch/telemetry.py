"""Periodic node load sampling: CPU load, system memory, per-GPU load.

A provider supplies raw readings; the sampler stamps them with nominal
tick times (tick * interval) so two captures of the same trace serialize
to identical bytes. Failed reads become recorded gaps, never interpolated
values. Node GPU load is the sum of per-device utilizations, so it ranges
over [0, n_gpus] like a load average rather than a percentage.
"""

import csv
import io
import math
import os
import re
import subprocess
from dataclasses import dataclass, field
from pathlib import Path


class SampleError(RuntimeError):
    """A provider failed to produce a complete reading."""


class EmptySeries(ValueError):
    """Statistics were requested over zero samples."""


@dataclass(frozen=True)
class GpuReading:
    """One device at one instant: util in [0, 1], resident memory in MiB."""

    util: float
    mem_mib: int

    def __post_init__(self):
        if not 0.0 <= self.util <= 1.0:
            raise ValueError(f"util {self.util} outside [0, 1]")
        if self.mem_mib < 0:
            raise ValueError(f"mem_mib {self.mem_mib} negative")


@dataclass(frozen=True)
class TelemetrySample:
    t: float
    cpu_load: float
    sys_mem_mib: int
    gpu: tuple[GpuReading, ...] = ()

    @property
    def gpu_load(self) -> float:
        return sum(g.util for g in self.gpu)

    @property
    def gpu_mem_mib(self) -> int:
        return sum(g.mem_mib for g in self.gpu)


@dataclass
class TelemetrySeries:
    samples: list = field(default_factory=list)
    gaps: list = field(default_factory=list)


@dataclass(frozen=True)
class SeriesStats:
    metric: str
    min: float
    avg: float
    max: float
    n_samples: int


def sample_once(provider, t: float = 0.0) -> TelemetrySample:
    """Take one reading; raises SampleError rather than returning partials."""
    try:
        cpu_load, sys_mem_mib, gpu_readings = provider.read()
    except SampleError:
        raise
    except Exception as exc:
        raise SampleError(f"provider read failed: {exc}") from exc
    return TelemetrySample(
        t=t,
        cpu_load=float(cpu_load),
        sys_mem_mib=int(sys_mem_mib),
        gpu=tuple(gpu_readings),
    )


def run_sampler(provider, interval_s: float, stop, *, max_ticks=None, waiter=None) -> TelemetrySeries:
    """Sample every interval_s seconds until stop is set.

    Timestamps are nominal (tick * interval_s), not wall-clock reads, so a
    replayed trace yields byte-identical CSV. ``waiter`` defaults to
    stop.wait; tests can inject a virtual clock. Read failures append the
    tick's timestamp to gaps and sampling continues.
    """
    if interval_s <= 0:
        raise ValueError(f"interval_s must be positive, got {interval_s}")
    wait = waiter if waiter is not None else stop.wait
    series = TelemetrySeries()
    tick = 0
    while True:
        if wait(interval_s):
            break
        tick += 1
        t = tick * interval_s
        try:
            series.samples.append(sample_once(provider, t=t))
        except SampleError:
            series.gaps.append(t)
        if max_ticks is not None and tick >= max_ticks:
            break
    return series


_SUM_METRICS = {
    "cpu_load": lambda s: s.cpu_load,
    "sys_mem_mib": lambda s: float(s.sys_mem_mib),
    "gpu_load": lambda s: s.gpu_load,
    "gpu_mem_mib": lambda s: float(s.gpu_mem_mib),
}


def _metric_fn(metric):
    if callable(metric):
        return metric
    if metric in _SUM_METRICS:
        return _SUM_METRICS[metric]
    m = re.match(r"^gpu(\d+)_(util|mem_mib)$", metric)
    if m:
        idx, kind = int(m.group(1)), m.group(2)
        if kind == "util":
            return lambda s: s.gpu[idx].util
        return lambda s: float(s.gpu[idx].mem_mib)
    raise ValueError(f"unknown metric {metric!r}")


def series_stats(series_or_samples, metric) -> SeriesStats:
    """min/avg/max of one metric over the captured samples (gaps excluded)."""
    samples = getattr(series_or_samples, "samples", series_or_samples)
    if not samples:
        raise EmptySeries("no samples to summarize")
    fn = _metric_fn(metric)
    values = [fn(s) for s in samples]
    lo, hi = min(values), max(values)
    # fsum then clamp so rounding noise cannot push the mean past the extremes
    avg = min(max(math.fsum(values) / len(values), lo), hi)
    name = metric if isinstance(metric, str) else getattr(metric, "__name__", "custom")
    return SeriesStats(metric=name, min=lo, avg=avg, max=hi, n_samples=len(values))


class ConstantProvider:
    """Same reading every tick; handy as a stub and for reproducibility tests."""

    def __init__(self, cpu_load=0.0, sys_mem_mib=0, gpu_readings=()):
        self._reading = (float(cpu_load), int(sys_mem_mib), tuple(gpu_readings))

    def read(self):
        return self._reading


class TraceProvider:
    """Replays a recorded list of (cpu_load, sys_mem_mib, gpu_readings).

    Reads past the end raise SampleError, which the sampler records as gaps.
    """

    def __init__(self, readings):
        self._readings = list(readings)
        self._pos = 0

    def read(self):
        if self._pos >= len(self._readings):
            raise SampleError("trace exhausted")
        reading = self._readings[self._pos]
        self._pos += 1
        return reading


class HostProvider:
    """Local host via the standard facilities: loadavg plus psutil memory.

    Reports no GPUs; pair with CommandProvider on GPU nodes.
    """

    def read(self):
        import psutil

        load1, _, _ = os.getloadavg()
        mem = psutil.virtual_memory().used // (1024 * 1024)
        return load1, mem, ()


DEFAULT_QUERY_COMMAND = (
    "nvidia-smi --query-gpu=utilization.gpu,memory.used --format=csv,noheader,nounits"
)


class CommandProvider:
    """GPU readings parsed from a query command printing one CSV row per device.

    Utilization columns are percentages and get scaled to [0, 1]. CPU load
    and system memory come from the same sources as HostProvider.
    """

    def __init__(self, ngpus: int, command: str = DEFAULT_QUERY_COMMAND, util_col: int = 0, mem_col: int = 1):
        if ngpus < 1:
            raise ValueError("CommandProvider needs at least one device")
        self.ngpus = ngpus
        self.command = command
        self.util_col = util_col
        self.mem_col = mem_col

    def read(self):
        import shlex

        import psutil

        try:
            out = subprocess.run(
                shlex.split(self.command),
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                timeout=10,
                check=True,
            ).stdout.decode("utf-8", "replace")
        except (OSError, subprocess.SubprocessError) as exc:
            raise SampleError(f"query command failed: {exc}") from exc

        rows = [r for r in csv.reader(io.StringIO(out)) if r]
        if len(rows) != self.ngpus:
            raise SampleError(f"expected {self.ngpus} device rows, got {len(rows)}")
        readings = []
        for row in rows:
            try:
                util = float(row[self.util_col].strip()) / 100.0
                mem = int(float(row[self.mem_col].strip()))
            except (ValueError, IndexError) as exc:
                raise SampleError(f"unparseable device row {row!r}") from exc
            readings.append(GpuReading(util=min(max(util, 0.0), 1.0), mem_mib=mem))

        load1, _, _ = os.getloadavg()
        sysmem = psutil.virtual_memory().used // (1024 * 1024)
        return load1, sysmem, tuple(readings)


def _csv_header(ngpu: int) -> list[str]:
    cols = ["t_s", "cpu_load", "sys_mem_mib"]
    for i in range(ngpu):
        cols += [f"gpu{i}_util", f"gpu{i}_mem_mib"]
    return cols


def format_series_csv(series) -> str:
    """Serialize samples and gaps to CSV; a gap row is a timestamp plus blanks.

    Rows are emitted in time order. Repeating a format call on the same
    series yields identical bytes.
    """
    samples = getattr(series, "samples", series)
    gaps = list(getattr(series, "gaps", ()))
    ngpu = max((len(s.gpu) for s in samples), default=0)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_csv_header(ngpu))
    rows = [(s.t, s) for s in samples] + [(t, None) for t in gaps]
    rows.sort(key=lambda r: r[0])
    for t, s in rows:
        if s is None:
            writer.writerow([repr(float(t))] + [""] * (2 + 2 * ngpu))
            continue
        row = [repr(float(s.t)), repr(float(s.cpu_load)), str(s.sys_mem_mib)]
        for g in s.gpu:
            row += [repr(float(g.util)), str(g.mem_mib)]
        row += [""] * (2 * (ngpu - len(s.gpu)))
        writer.writerow(row)
    return buf.getvalue()


def write_series_csv(series, path) -> None:
    Path(path).write_text(format_series_csv(series))


def read_series_csv(path) -> TelemetrySeries:
    """Inverse of write_series_csv; blank-valued rows come back as gaps."""
    series = TelemetrySeries()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ngpu = (len(header) - 3) // 2
        for row in reader:
            if not row:
                continue
            t = float(row[0])
            if all(cell == "" for cell in row[1:]):
                series.gaps.append(t)
                continue
            gpu = []
            for i in range(ngpu):
                u, m = row[3 + 2 * i], row[4 + 2 * i]
                if u == "" and m == "":
                    continue
                gpu.append(GpuReading(util=float(u), mem_mib=int(m)))
            series.samples.append(
                TelemetrySample(
                    t=t,
                    cpu_load=float(row[1]),
                    sys_mem_mib=int(row[2]),
                    gpu=tuple(gpu),
                )
            )
    return series
