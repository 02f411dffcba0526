"""Batch launcher for independent tasks on GPU nodes.

A launch is described by a triple (NNODE, NPPN, NTPP): nodes, processes
per node, threads per process. Processes are pinned round-robin to the
node's devices so several can share one GPU. The package plans slot
grids, emits portable shell scripts, executes plans natively with
timing capture, samples node load while runs are in flight, and models
throughput and memory contention ahead of time with a discrete-event
simulator.
"""

from .core import (
    DEFAULT_ENV_NAMES,
    CpuOversubscribed,
    EnvNames,
    NodeSpec,
    NoGpu,
    NonPositiveField,
    SlotBinding,
    TripleError,
    TripleSpec,
    Verdict,
    assign_gpu,
    expand_slots,
    render_env,
    validate_triple,
)
from .executor import RunReport, TaskResult, classify_failure, run_plan
from .plan import (
    LaunchPlan,
    PlanSummary,
    TaskDef,
    build_plan,
    emit_script,
    load_workload,
    plan_summary,
)
from .report import SpeedupRow, compute_speedup, format_speedup_display, write_speedup_csv
from .sim import (
    SimOutcome,
    SimTaskProfile,
    make_slowdown,
    profile_from_config,
    simulate,
    sweep,
    sweep_outcomes,
    synthetic_trace,
)
from .telemetry import (
    CommandProvider,
    ConstantProvider,
    GpuReading,
    HostProvider,
    TelemetrySample,
    TelemetrySeries,
    TraceProvider,
    run_sampler,
    sample_once,
    series_stats,
    write_series_csv,
)

__version__ = "0.1.0"
