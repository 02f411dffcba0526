"""Command-line front end.

One parser, five modes:

  plan    write per-node shell scripts plus a plan summary
  exec    run one node's share natively, optionally sampling telemetry
  sim     run the contention model over a plan
  sweep   simulate a workload across process counts and tabulate speedup
  report  build a speedup table from saved run or simulation outputs

Settings resolve as flag > environment > config file > built-in default;
only the device query command has an environment override.
"""

import argparse
import json
import os
import sys
import threading
import time
from pathlib import Path

from .core import NodeSpec, TripleError, TripleSpec, validate_triple
from .executor import run_plan
from .plan import TaskDef, build_plan, emit_script, load_workload, plan_summary
from .report import (
    MissingBaseline,
    SpeedupRow,
    compute_speedup,
    format_speedup_display,
    write_speedup_csv,
)
from .sim import (
    SLOWDOWN_REGISTRY,
    SimTaskProfile,
    make_slowdown,
    simulate,
    sweep_outcomes,
    synthetic_trace,
)
from .telemetry import (
    DEFAULT_QUERY_COMMAND,
    CommandProvider,
    ConstantProvider,
    GpuReading,
    HostProvider,
    read_series_csv,
    run_sampler,
    series_stats,
    write_series_csv,
)

QUERY_CMD_ENV = "TRILAUNCH_QUERY_CMD"

DEFAULTS = {
    "cores": os.cpu_count() or 1,
    "gpus": 0,
    "gpu_mem": 32768,
    "strict": False,
    "outdir": "runs",
    "node_index": 0,
    "provider": "none",
    "query_cmd": DEFAULT_QUERY_COMMAND,
    "interval": 10.0,
    "slowdown": "none",
    "slowdown_table": {},
    "capacity": 1.0,
    "base_duration": 1.0,
    "task_mem": 1,
    "duty": 1.0,
    "startup": 0.0,
}


class ConfigError(ValueError):
    """Bad or missing user input; reported on stderr with exit status 2."""


class _Settings:
    """Layered lookup: flag, then environment, then config file, then default."""

    def __init__(self, args, config: dict):
        self._args = args
        self._config = config

    def get(self, name, default=None):
        value = getattr(self._args, name, None)
        if value is not None:
            return value
        if name == "query_cmd":
            env = os.environ.get(QUERY_CMD_ENV)
            if env:
                return env
        if name in self._config:
            return self._config[name]
        return DEFAULTS.get(name, default)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trilaunch",
        description="Launch batches of independent tasks across slot grids that share GPUs.",
    )
    parser.add_argument("--mode", required=True, choices=("plan", "exec", "sim", "sweep", "report"))
    parser.add_argument("--config", help="JSON file supplying defaults for any setting")
    parser.add_argument("--triple", help="grid as NNODE,NPPN,NTPP")
    parser.add_argument("--tasks", help="workload file: one command per line, or JSONL records")
    parser.add_argument("--num-tasks", type=int, help="synthesize N no-op tasks instead of --tasks")
    parser.add_argument("--cores", type=int, help="physical cores per node")
    parser.add_argument("--gpus", type=int, help="devices per node")
    parser.add_argument("--gpu-mem", type=int, help="per-device memory in MiB")
    parser.add_argument(
        "--strict",
        action="store_true",
        default=None,
        help="refuse CPU oversubscription instead of warning",
    )
    parser.add_argument("--outdir", help="parent directory for run outputs")
    parser.add_argument("--run-name", help="run directory name (default: timestamp plus mode)")
    parser.add_argument("--node-index", type=int, help="which node's share to execute")
    parser.add_argument("--timeout", type=float, help="per-task timeout in seconds")
    parser.add_argument(
        "--provider",
        choices=("none", "host", "command", "const"),
        help="telemetry source while executing",
    )
    parser.add_argument(
        "--query-cmd",
        help=f"device query command for --provider command (or {QUERY_CMD_ENV})",
    )
    parser.add_argument("--interval", type=float, help="sampling interval in seconds")
    parser.add_argument("--slowdown", choices=tuple(sorted(SLOWDOWN_REGISTRY)))
    parser.add_argument("--slowdown-table", help="K:V[,K:V...] points for --slowdown table")
    parser.add_argument("--capacity", type=float, help="capacity for --slowdown saturating")
    parser.add_argument("--base-duration", type=float, help="lone-task duration in seconds")
    parser.add_argument("--task-mem", type=int, help="per-task device memory in MiB")
    parser.add_argument("--duty", type=float, help="lone-task device busy fraction in (0, 1]")
    parser.add_argument("--startup", type=float, help="seconds before a launched task touches its device")
    parser.add_argument("--nppn-list", help="comma-separated process counts for --mode sweep")
    parser.add_argument("--inputs", nargs="+", help="run dirs or JSON files for --mode report")
    parser.add_argument("--baseline", type=int, help="baseline nppn for speedup (default: smallest)")
    return parser


def _triple_from(s) -> TripleSpec:
    raw = s.get("triple")
    if raw is None:
        raise ConfigError("--triple NNODE,NPPN,NTPP is required for this mode")
    try:
        if isinstance(raw, (list, tuple)):
            return TripleSpec(*(int(x) for x in raw))
        return TripleSpec.parse(str(raw))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad triple {raw!r}: {exc}") from exc


def _node_from(s) -> NodeSpec:
    cores = int(s.get("cores"))
    gpus = int(s.get("gpus"))
    mem = int(s.get("gpu_mem")) if gpus > 0 else 0
    try:
        return NodeSpec(cores=cores, gpus=gpus, gpu_mem_mib=mem)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _tasks_from(s) -> list[TaskDef]:
    path = s.get("tasks")
    num = s.get("num_tasks")
    if path and num:
        raise ConfigError("give either --tasks or --num-tasks, not both")
    if path:
        try:
            tasks = load_workload(path)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load workload {path}: {exc}") from exc
        if not tasks:
            raise ConfigError(f"workload {path} holds no tasks")
        return tasks
    if num is not None:
        n = int(num)
        if n < 1:
            raise ConfigError(f"--num-tasks must be >= 1, got {n}")
        return [TaskDef(task_id=i, argv=("true",)) for i in range(n)]
    raise ConfigError("a workload is required: --tasks FILE or --num-tasks N")


def _parse_table(text: str) -> dict:
    table = {}
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        try:
            k, v = piece.split(":")
            table[int(k)] = float(v)
        except ValueError as exc:
            raise ConfigError(f"bad table entry {piece!r}, expected K:V") from exc
    return table


def _profile_from(s) -> SimTaskProfile:
    name = s.get("slowdown")
    params = {}
    if name == "table":
        table = s.get("slowdown_table")
        if isinstance(table, str):
            table = _parse_table(table)
        table = {int(k): float(v) for k, v in (table or {}).items()}
        if not table:
            raise ConfigError("table slowdown needs --slowdown-table K:V[,K:V...]")
        params["table"] = table
    elif name == "saturating":
        params["capacity"] = float(s.get("capacity"))
    try:
        return SimTaskProfile(
            base_duration_s=float(s.get("base_duration")),
            mem_mib=int(s.get("task_mem")),
            slowdown=make_slowdown(name, **params),
            duty=float(s.get("duty")),
            startup_s=float(s.get("startup")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _provider_from(s, node: NodeSpec):
    kind = s.get("provider")
    if kind == "none":
        return None
    if float(s.get("interval")) <= 0:
        raise ConfigError("--interval must be positive")
    if kind == "host":
        if node.gpus > 0:
            raise ConfigError(
                "host provider reports no devices; use --provider command when --gpus > 0"
            )
        return HostProvider()
    if kind == "command":
        if node.gpus < 1:
            raise ConfigError("command provider needs --gpus >= 1")
        return CommandProvider(ngpus=node.gpus, command=str(s.get("query_cmd")))
    if kind == "const":
        return ConstantProvider(
            cpu_load=0.0,
            sys_mem_mib=0,
            gpu_readings=tuple(GpuReading(0.0, 0) for _ in range(node.gpus)),
        )
    raise ConfigError(f"unknown provider {kind!r}")


def _resolve_run_dir(s, mode: str) -> Path:
    base = Path(s.get("outdir"))
    name = s.get("run_name") or time.strftime("%Y%m%d-%H%M%S") + "-" + mode
    run_dir = base / name
    n = 2
    while run_dir.exists():
        run_dir = base / f"{name}-{n}"
        n += 1
    run_dir.mkdir(parents=True)
    return run_dir


def _plan_inputs(s):
    triple = _triple_from(s)
    node = _node_from(s)
    tasks = _tasks_from(s)
    strict = bool(s.get("strict"))
    validate_triple(triple, node, strict=strict).raise_for_error()
    for warning in validate_triple(triple, node).warnings:
        print(f"warning: {warning}", file=sys.stderr)
    try:
        plan = build_plan(tasks, triple, node, strict=strict)
    except TripleError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return triple, node, plan


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _mode_plan(s) -> int:
    triple, _, plan = _plan_inputs(s)
    run_dir = _resolve_run_dir(s, "plan")
    _write_json(run_dir / "plan_summary.json", plan_summary(plan).to_json_dict())
    for i in range(triple.nnode):
        path = run_dir / f"node_{i:03d}.sh"
        path.write_text(emit_script(plan, i))
        path.chmod(0o755)
        print(path)
    print(run_dir / "plan_summary.json")
    return 0


def _mode_exec(s) -> int:
    triple, node, plan = _plan_inputs(s)
    node_index = int(s.get("node_index"))
    if not 0 <= node_index < triple.nnode:
        raise ConfigError(f"--node-index {node_index} outside 0..{triple.nnode - 1}")
    provider = _provider_from(s, node)
    run_dir = _resolve_run_dir(s, "exec")

    stop = threading.Event()
    holder: dict = {}
    sampler = None
    if provider is not None:
        interval = float(s.get("interval"))

        def _capture():
            holder["series"] = run_sampler(provider, interval, stop)

        sampler = threading.Thread(target=_capture, name="sampler", daemon=True)
        sampler.start()

    timeout = s.get("timeout")
    report = run_plan(
        plan,
        node_index,
        timeout_s=float(timeout) if timeout is not None else None,
        log_dir=run_dir / "logs",
    )
    if sampler is not None:
        stop.set()
        sampler.join()
        if "series" in holder:
            write_series_csv(holder["series"], run_dir / "telemetry.csv")

    report.write_json(run_dir / "run_report.json")
    print(
        f"elapsed_ms={report.elapsed_ms} failures={report.failures} "
        f"peak_concurrency={report.max_observed_concurrency}"
    )
    print(run_dir / "run_report.json")
    return report.exit_code


def _mode_sim(s) -> int:
    triple, node, plan = _plan_inputs(s)
    if node.gpus < 1:
        raise ConfigError("--mode sim needs --gpus >= 1")
    profile = _profile_from(s)
    outcome = simulate(plan, profile)
    run_dir = _resolve_run_dir(s, "sim")
    _write_json(run_dir / "plan_summary.json", plan_summary(plan).to_json_dict())
    _write_json(run_dir / "sim_outcome.json", outcome.to_json_dict())
    if triple.nnode == 1:
        write_series_csv(synthetic_trace(outcome, float(s.get("interval"))), run_dir / "telemetry.csv")
    print(
        f"elapsed_s={outcome.total_elapsed_s} done={outcome.completed} "
        f"oom={outcome.failures} peak_gpu_mem_mib={outcome.peak_gpu_mem_mib}"
    )
    print(run_dir / "sim_outcome.json")
    return 0


def _stats_rows(base_rows, outcomes_by_nppn) -> list[SpeedupRow]:
    rows = []
    for row in base_rows:
        oc = outcomes_by_nppn[row.nppn]
        end = oc.total_elapsed_s
        load = oc.node_gpu_load()
        mem = oc.node_gpu_mem()
        load_lo, load_hi = load.bounds(0.0, end)
        mem_lo, mem_hi = mem.bounds(0.0, end)
        rows.append(
            SpeedupRow(
                nppn=row.nppn,
                total_elapsed_s=row.total_elapsed_s,
                speedup=row.speedup,
                gpu_load_min=load_lo,
                gpu_load_avg=load.mean(0.0, end),
                gpu_load_max=load_hi,
                gpu_mem_mib_min=mem_lo,
                gpu_mem_mib_avg=mem.mean(0.0, end),
                gpu_mem_mib_max=mem_hi,
                failures=oc.failures,
            )
        )
    return rows


def _mode_sweep(s) -> int:
    node = _node_from(s)
    if node.gpus < 1:
        raise ConfigError("--mode sweep needs --gpus >= 1")
    tasks = _tasks_from(s)
    raw = s.get("nppn_list")
    if not raw:
        raise ConfigError("--nppn-list N[,N...] is required for sweeps")
    if isinstance(raw, str):
        nppn_list = [int(x) for x in raw.split(",") if x.strip()]
    else:
        nppn_list = [int(x) for x in raw]
    profile = _profile_from(s)

    outcomes = sweep_outcomes(tasks, profile, node, nppn_list)
    by_nppn = {oc.triple.nppn: oc for oc in outcomes}
    elapsed_by = {n: oc.total_elapsed_s for n, oc in by_nppn.items()}
    try:
        base_rows = compute_speedup(elapsed_by)
    except (MissingBaseline, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    rows = _stats_rows(base_rows, by_nppn)

    run_dir = _resolve_run_dir(s, "sweep")
    write_speedup_csv(rows, run_dir / "speedup.csv")
    outcome_dir = run_dir / "outcomes"
    outcome_dir.mkdir()
    for oc in outcomes:
        _write_json(outcome_dir / f"nppn_{oc.triple.nppn:02d}.json", oc.to_json_dict())
    sys.stdout.write(format_speedup_display(rows))
    print(run_dir / "speedup.csv")
    return 0


def _load_report_entry(json_path: Path):
    """Returns (nppn, elapsed_s, (load_stats, mem_stats) or None, failures)."""
    try:
        obj = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{json_path}: {exc}") from exc
    if "total_elapsed_s" in obj:
        nppn = int(obj["triple"]["nppn"])
        elapsed = float(obj["total_elapsed_s"])
        stats = (obj.get("gpu_load"), obj.get("gpu_mem_mib"))
        if None in stats:
            stats = None
        return nppn, elapsed, stats, int(obj.get("tasks_oom", 0))
    if "elapsed_ms" in obj:
        nppn = int(obj["plan"]["triple"]["nppn"])
        elapsed = float(obj["elapsed_ms"]) / 1000.0
        failures = int(obj.get("failures", 0))
        stats = None
        telemetry = json_path.parent / "telemetry.csv"
        if telemetry.exists():
            series = read_series_csv(telemetry)
            if series.samples:
                load = series_stats(series, "gpu_load")
                mem = series_stats(series, "gpu_mem_mib")
                stats = (
                    {"min": load.min, "avg": load.avg, "max": load.max},
                    {"min": mem.min, "avg": mem.avg, "max": mem.max},
                )
        return nppn, elapsed, stats, failures
    raise ConfigError(f"{json_path}: neither a run report nor a simulation outcome")


def _mode_report(s) -> int:
    inputs = s.get("inputs")
    if not inputs:
        raise ConfigError("--inputs FILE_OR_DIR ... is required for reports")
    entries: dict = {}
    for raw in inputs:
        path = Path(raw)
        json_path = path
        if path.is_dir():
            for name in ("run_report.json", "sim_outcome.json"):
                if (path / name).exists():
                    json_path = path / name
                    break
            else:
                raise ConfigError(f"{path}: no run_report.json or sim_outcome.json inside")
        nppn, elapsed, stats, failures = _load_report_entry(json_path)
        if nppn in entries:
            raise ConfigError(f"duplicate nppn={nppn} from {json_path}")
        entries[nppn] = (elapsed, stats, failures)

    baseline = s.get("baseline")
    try:
        base_rows = compute_speedup(
            {n: e for n, (e, _, _) in entries.items()},
            int(baseline) if baseline is not None else None,
        )
    except (MissingBaseline, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    rows = []
    for row in base_rows:
        _, stats, failures = entries[row.nppn]
        if stats is not None:
            load, mem = stats
            rows.append(
                SpeedupRow(
                    nppn=row.nppn,
                    total_elapsed_s=row.total_elapsed_s,
                    speedup=row.speedup,
                    gpu_load_min=float(load["min"]),
                    gpu_load_avg=float(load["avg"]),
                    gpu_load_max=float(load["max"]),
                    gpu_mem_mib_min=float(mem["min"]),
                    gpu_mem_mib_avg=float(mem["avg"]),
                    gpu_mem_mib_max=float(mem["max"]),
                    failures=failures,
                )
            )
        else:
            rows.append(
                SpeedupRow(
                    nppn=row.nppn,
                    total_elapsed_s=row.total_elapsed_s,
                    speedup=row.speedup,
                    failures=failures,
                )
            )
    run_dir = _resolve_run_dir(s, "report")
    write_speedup_csv(rows, run_dir / "speedup.csv")
    sys.stdout.write(format_speedup_display(rows))
    print(run_dir / "speedup.csv")
    return 0


_HANDLERS = {
    "plan": _mode_plan,
    "exec": _mode_exec,
    "sim": _mode_sim,
    "sweep": _mode_sweep,
    "report": _mode_report,
}


def run_cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    config: dict = {}
    if args.config:
        try:
            config = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
            return 2
        if not isinstance(config, dict):
            print(f"error: config {args.config} must hold a JSON object", file=sys.stderr)
            return 2

    settings = _Settings(args, config)
    try:
        return _HANDLERS[args.mode](settings)
    except (ConfigError, TripleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
