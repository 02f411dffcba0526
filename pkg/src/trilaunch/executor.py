"""Native plan execution: one worker thread per slot, subprocesses per task.

Each slot drains its queue sequentially under the slot's pinned
environment; slots run concurrently. Timing uses a single monotonic
origin so intervals are comparable across threads. A failing task never
stops its queue; the launcher exit code is min(failures, 125).
"""

import os
import re
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .plan import LaunchPlan, PlanSummary, plan_summary

# timeout(1) convention; also leaves 126/127 free for shell-style spawn errors
TIMEOUT_EXIT_STATUS = 124
SPAWN_FAILURE_EXIT_STATUS = 127
MAX_FAILURE_EXIT = 125
STDERR_TAIL_BYTES = 4096

DEFAULT_OOM_PATTERNS = (
    r"out of memory",
    r"cannot allocate memory",
    r"\boom\b",
)


@dataclass(frozen=True)
class TaskResult:
    task_id: int
    slot_index: int
    gpu_index: int | None
    start_ms: int
    end_ms: int
    exit_status: int
    oom_flag: bool = False

    @property
    def duration_ms(self) -> int:
        return self.end_ms - self.start_ms

    @property
    def failed(self) -> bool:
        return self.exit_status != 0

    def to_json_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "slot_index": self.slot_index,
            "gpu_index": self.gpu_index,
            "start_ms": self.start_ms,
            "end_ms": self.end_ms,
            "exit_status": self.exit_status,
            "oom_flag": self.oom_flag,
        }


@dataclass(frozen=True)
class RunReport:
    plan: PlanSummary
    node_index: int
    results: tuple[TaskResult, ...]
    elapsed_ms: int
    max_observed_concurrency: int

    @property
    def failures(self) -> int:
        return sum(1 for r in self.results if r.failed)

    @property
    def exit_code(self) -> int:
        return min(self.failures, MAX_FAILURE_EXIT)

    def to_json_dict(self) -> dict:
        return {
            "plan": self.plan.to_json_dict(),
            "node_index": self.node_index,
            "elapsed_ms": self.elapsed_ms,
            "max_observed_concurrency": self.max_observed_concurrency,
            "failures": self.failures,
            "exit_code": self.exit_code,
            "results": [r.to_json_dict() for r in self.results],
        }

    def write_json(self, path) -> None:
        import json

        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2) + "\n")


def classify_failure(exit_status: int, stderr_tail: str, oom_patterns=DEFAULT_OOM_PATTERNS) -> str:
    """Bucket a nonzero exit as 'timeout', 'oom', or 'generic'."""
    if exit_status == TIMEOUT_EXIT_STATUS:
        return "timeout"
    for pat in oom_patterns:
        if re.search(pat, stderr_tail, re.IGNORECASE):
            return "oom"
    return "generic"


def _spawn(argv, env, timeout_s, log_dir, task_id):
    """Run one task; return (exit_status, stderr_tail)."""
    if log_dir is not None:
        out_path = Path(log_dir) / f"task_{task_id}.out"
        err_path = Path(log_dir) / f"task_{task_id}.err"
        try:
            with open(out_path, "wb") as out, open(err_path, "wb") as err:
                proc = subprocess.run(
                    argv, env=env, stdout=out, stderr=err, timeout=timeout_s
                )
            status = proc.returncode
        except subprocess.TimeoutExpired:
            status = TIMEOUT_EXIT_STATUS
        except OSError as exc:
            err_path.write_text(str(exc) + "\n")
            return SPAWN_FAILURE_EXIT_STATUS, str(exc)
        try:
            data = err_path.read_bytes()[-STDERR_TAIL_BYTES:]
        except OSError:
            data = b""
        return status, data.decode("utf-8", "replace")

    try:
        proc = subprocess.run(
            argv,
            env=env,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.PIPE,
            timeout=timeout_s,
        )
    except subprocess.TimeoutExpired as exc:
        tail = (exc.stderr or b"")[-STDERR_TAIL_BYTES:]
        return TIMEOUT_EXIT_STATUS, tail.decode("utf-8", "replace")
    except OSError as exc:
        return SPAWN_FAILURE_EXIT_STATUS, str(exc)
    tail = (proc.stderr or b"")[-STDERR_TAIL_BYTES:]
    return proc.returncode, tail.decode("utf-8", "replace")


def _max_overlap(intervals) -> int:
    """Peak number of intervals covering a single instant.

    Ends sort before starts at the same timestamp, so back-to-back tasks
    in one slot count as 1, not 2.
    """
    events = []
    for start, end in intervals:
        events.append((start, 1))
        events.append((end, -1))
    events.sort(key=lambda e: (e[0], e[1]))
    peak = cur = 0
    for _, delta in events:
        cur += delta
        peak = max(peak, cur)
    return peak


def run_plan(
    plan: LaunchPlan,
    node_index: int = 0,
    *,
    timeout_s: float | None = None,
    log_dir=None,
    oom_patterns=DEFAULT_OOM_PATTERNS,
    base_env: dict | None = None,
) -> RunReport:
    """Execute this node's share of the plan natively.

    One thread per slot; each thread runs its queue front to back with
    subprocess.run under env = base_env (default os.environ) + slot env +
    task extra_env. Timestamps are milliseconds from a shared monotonic
    origin taken just before the slot threads start.
    """
    node_bindings = [b for b in plan.bindings if b.node_index == node_index]
    if not node_bindings:
        raise IndexError(f"node_index {node_index} has no slots in this plan")
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)

    base = dict(os.environ if base_env is None else base_env)
    results: list[TaskResult] = []
    lock = threading.Lock()
    t0 = time.monotonic()

    def now_ms() -> int:
        return int(round((time.monotonic() - t0) * 1000))

    def run_slot(binding):
        env = dict(base)
        env.update(binding.env)
        for task in plan.queues[(node_index, binding.slot_index)]:
            task_env = dict(env)
            task_env.update(task.extra_env)
            start = now_ms()
            status, tail = _spawn(list(task.argv), task_env, timeout_s, log_dir, task.task_id)
            end = now_ms()
            oom = status != 0 and classify_failure(status, tail, oom_patterns) == "oom"
            with lock:
                results.append(
                    TaskResult(
                        task_id=task.task_id,
                        slot_index=binding.slot_index,
                        gpu_index=binding.gpu_index,
                        start_ms=start,
                        end_ms=end,
                        exit_status=status,
                        oom_flag=oom,
                    )
                )

    threads = [
        threading.Thread(target=run_slot, args=(b,), name=f"slot-{b.slot_index}")
        for b in node_bindings
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    elapsed = now_ms()

    ordered = tuple(sorted(results, key=lambda r: r.task_id))
    peak = _max_overlap([(r.start_ms, r.end_ms) for r in ordered]) if ordered else 0
    return RunReport(
        plan=plan_summary(plan),
        node_index=node_index,
        results=ordered,
        elapsed_ms=elapsed,
        max_observed_concurrency=peak,
    )
