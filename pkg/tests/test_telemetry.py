import threading

import pytest

from trilaunch.telemetry import (
    CommandProvider,
    ConstantProvider,
    EmptySeries,
    GpuReading,
    HostProvider,
    SampleError,
    TelemetrySample,
    TelemetrySeries,
    TraceProvider,
    format_series_csv,
    read_series_csv,
    run_sampler,
    sample_once,
    series_stats,
    write_series_csv,
)


def gpu(util, mem):
    return GpuReading(util=util, mem_mib=mem)


def make_trace(n):
    return [(float(i), 1000 + i, (gpu(i / 10.0, 100 * i), gpu(0.5, 256))) for i in range(n)]


def never_stop(interval):
    return False


def test_gpu_reading_validation():
    with pytest.raises(ValueError):
        GpuReading(util=1.5, mem_mib=0)
    with pytest.raises(ValueError):
        GpuReading(util=0.5, mem_mib=-1)


def test_sample_once_wraps_provider_errors():
    class Broken:
        def read(self):
            raise RuntimeError("no device")

    with pytest.raises(SampleError):
        sample_once(Broken())


def test_sample_aggregates():
    sample = TelemetrySample(t=1.0, cpu_load=2.0, sys_mem_mib=512, gpu=(gpu(0.25, 100), gpu(0.5, 200)))
    assert sample.gpu_load == 0.75
    assert sample.gpu_mem_mib == 300


def test_sampler_uses_nominal_tick_times():
    series = run_sampler(ConstantProvider(1.0, 64), 15.0, threading.Event(), max_ticks=4, waiter=never_stop)
    assert [s.t for s in series.samples] == [15.0, 30.0, 45.0, 60.0]
    assert series.gaps == []


def test_sampler_stops_on_event():
    stop = threading.Event()
    stop.set()
    series = run_sampler(ConstantProvider(), 0.01, stop)
    assert series.samples == []


def test_sampler_records_gaps_not_guesses():
    provider = TraceProvider(make_trace(3))
    series = run_sampler(provider, 10.0, threading.Event(), max_ticks=5, waiter=never_stop)
    assert len(series.samples) == 3
    assert series.gaps == [40.0, 50.0]


def test_sampler_rejects_bad_interval():
    with pytest.raises(ValueError):
        run_sampler(ConstantProvider(), 0.0, threading.Event(), max_ticks=1, waiter=never_stop)


def test_series_stats_order_and_metrics():
    provider = TraceProvider(make_trace(6))
    series = run_sampler(provider, 1.0, threading.Event(), max_ticks=6, waiter=never_stop)
    for metric in ("cpu_load", "sys_mem_mib", "gpu_load", "gpu_mem_mib", "gpu0_util", "gpu1_mem_mib"):
        stats = series_stats(series, metric)
        assert stats.min <= stats.avg <= stats.max
        assert stats.n_samples == 6
    assert series_stats(series, "gpu0_util").max == 0.5
    assert series_stats(series, "gpu1_mem_mib").min == 256.0
    assert series_stats(series, lambda s: s.cpu_load * 2).max == 10.0


def test_series_stats_rejects_unknown_and_empty():
    with pytest.raises(EmptySeries):
        series_stats(TelemetrySeries(), "cpu_load")
    provider = ConstantProvider(1.0, 1)
    series = run_sampler(provider, 1.0, threading.Event(), max_ticks=1, waiter=never_stop)
    with pytest.raises(ValueError):
        series_stats(series, "gpu_wattage")


def test_csv_roundtrip(tmp_path):
    provider = TraceProvider(make_trace(4))
    series = run_sampler(provider, 2.0, threading.Event(), max_ticks=6, waiter=never_stop)
    path = tmp_path / "telemetry.csv"
    write_series_csv(series, path)
    back = read_series_csv(path)
    assert [s.t for s in back.samples] == [s.t for s in series.samples]
    assert back.gaps == series.gaps
    assert back.samples[2].gpu == series.samples[2].gpu
    header = path.read_text().splitlines()[0]
    assert header == "t_s,cpu_load,sys_mem_mib,gpu0_util,gpu0_mem_mib,gpu1_util,gpu1_mem_mib"


def test_csv_bit_reproducible():
    a = run_sampler(TraceProvider(make_trace(5)), 1.5, threading.Event(), max_ticks=5, waiter=never_stop)
    b = run_sampler(TraceProvider(make_trace(5)), 1.5, threading.Event(), max_ticks=5, waiter=never_stop)
    assert format_series_csv(a) == format_series_csv(b)


def test_command_provider_parses_csv_rows():
    provider = CommandProvider(ngpus=2, command="printf '37, 1024\\n100, 30000\\n'")
    cpu_load, sys_mem, readings = provider.read()
    assert cpu_load >= 0.0
    assert sys_mem > 0
    assert readings[0] == gpu(0.37, 1024)
    assert readings[1] == gpu(1.0, 30000)


def test_command_provider_row_count_mismatch():
    provider = CommandProvider(ngpus=2, command="printf '50, 100\\n'")
    with pytest.raises(SampleError):
        provider.read()


def test_command_provider_failure_is_sample_error():
    provider = CommandProvider(ngpus=1, command="/nonexistent/query-tool")
    with pytest.raises(SampleError):
        provider.read()


def test_command_provider_bad_fields():
    provider = CommandProvider(ngpus=1, command="printf 'N/A, what\\n'")
    with pytest.raises(SampleError):
        provider.read()


def test_host_provider_reads_local_machine():
    cpu_load, sys_mem, readings = HostProvider().read()
    assert cpu_load >= 0.0
    assert sys_mem > 0
    assert readings == ()
