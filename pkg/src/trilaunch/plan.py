"""Task dealing and execution-script generation.

Tasks are dealt to slots cyclically (task i goes to slot i mod S) so queue
lengths never differ by more than one. ``emit_script`` turns one node's
share of the plan into a plain POSIX shell script: one backgrounded
subshell per slot running its queue sequentially, then a final wait.
"""

import json
import re
import shlex
from dataclasses import dataclass
from pathlib import Path

from .core import (
    DEFAULT_ENV_NAMES,
    EnvNames,
    NodeSpec,
    SlotBinding,
    TripleSpec,
    expand_slots,
    validate_triple,
)

LOG_DIR_ENV = "TRILAUNCH_LOG_DIR"
DEFAULT_LOG_DIR = "trilaunch_logs"

_ENV_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class EmptyWorkload(ValueError):
    """A plan was requested for zero tasks."""


class BadNodeIndex(IndexError):
    """node_index outside the triple's node range."""


@dataclass(frozen=True)
class TaskDef:
    """One independent command; extra_env pairs go on top of the slot env."""

    task_id: int
    argv: tuple[str, ...]
    extra_env: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "argv", tuple(str(a) for a in self.argv))
        object.__setattr__(
            self, "extra_env", tuple((str(k), str(v)) for k, v in self.extra_env)
        )
        if not self.argv:
            raise ValueError(f"task {self.task_id}: argv must be non-empty")
        for name, _ in self.extra_env:
            if not _ENV_NAME_RE.match(name):
                raise ValueError(f"task {self.task_id}: bad env name {name!r}")


@dataclass(frozen=True)
class LaunchPlan:
    """Per-slot sequential queues plus the slot bindings they run under.

    queues maps (node_index, slot_index) to an ordered task tuple and covers
    the expanded slot grid exactly (empty tuples for idle slots).
    """

    triple: TripleSpec
    node: NodeSpec
    bindings: tuple[SlotBinding, ...]
    queues: dict

    @property
    def total_tasks(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def queue_for(self, node_index: int, slot_index: int) -> tuple[TaskDef, ...]:
        return self.queues[(node_index, slot_index)]


@dataclass(frozen=True)
class PlanSummary:
    triple: TripleSpec
    node: NodeSpec
    total_slots: int
    total_tasks: int
    queue_lengths: tuple[int, ...]
    gpu_slot_counts: dict

    def to_json_dict(self) -> dict:
        return {
            "triple": {"nnode": self.triple.nnode, "nppn": self.triple.nppn, "ntpp": self.triple.ntpp},
            "node": {"cores": self.node.cores, "gpus": self.node.gpus, "gpu_mem_mib": self.node.gpu_mem_mib},
            "total_slots": self.total_slots,
            "total_tasks": self.total_tasks,
            "queue_lengths": list(self.queue_lengths),
            "gpu_slot_counts": {str(k): self.gpu_slot_counts[k] for k in sorted(self.gpu_slot_counts)},
        }


def build_plan(
    tasks,
    triple: TripleSpec,
    node: NodeSpec,
    names: EnvNames = DEFAULT_ENV_NAMES,
    strict: bool = False,
) -> LaunchPlan:
    """Deal tasks onto the slot grid; task i goes to slot (i mod S).

    Input order is preserved within each queue, so concatenating queues in
    slot order and sorting by task_id recovers the workload exactly.
    """
    tasks = list(tasks)
    if not tasks:
        raise EmptyWorkload("no tasks to schedule")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError("task_id values must be unique within a workload")
    validate_triple(triple, node, strict=strict).raise_for_error()

    bindings = expand_slots(triple, node, names)
    lanes = [[] for _ in bindings]
    for i, task in enumerate(tasks):
        lanes[i % len(bindings)].append(task)
    queues = {
        (b.node_index, b.slot_index): tuple(lane) for b, lane in zip(bindings, lanes)
    }
    return LaunchPlan(triple, node, tuple(bindings), queues)


def plan_summary(plan: LaunchPlan) -> PlanSummary:
    lengths = tuple(len(plan.queues[(b.node_index, b.slot_index)]) for b in plan.bindings)
    counts: dict = {}
    for b in plan.bindings:
        if b.gpu_index is not None:
            counts[b.gpu_index] = counts.get(b.gpu_index, 0) + 1
    return PlanSummary(
        triple=plan.triple,
        node=plan.node,
        total_slots=len(plan.bindings),
        total_tasks=plan.total_tasks,
        queue_lengths=lengths,
        gpu_slot_counts=counts,
    )


def emit_script(plan: LaunchPlan, node_index: int) -> str:
    """Shell script for one node: per-slot backgrounded queues plus a wait.

    Byte-deterministic for a given plan. Task stdout/stderr land in
    $TRILAUNCH_LOG_DIR (default trilaunch_logs/) as task_<id>.out/.err so
    concurrent slots never interleave output. A failing task does not stop
    the rest of its queue.
    """
    if not 0 <= node_index < plan.triple.nnode:
        raise BadNodeIndex(f"node_index {node_index} outside 0..{plan.triple.nnode - 1}")

    node_bindings = [b for b in plan.bindings if b.node_index == node_index]
    ntasks = sum(len(plan.queues[(node_index, b.slot_index)]) for b in node_bindings)
    lines = [
        "#!/bin/sh",
        f"# node {node_index} of triple {plan.triple}: "
        f"{len(node_bindings)} slot(s), {ntasks} task(s)",
        f'log_dir="${{{LOG_DIR_ENV}:-{DEFAULT_LOG_DIR}}}"',
        'mkdir -p "$log_dir"',
        "",
    ]
    for binding in node_bindings:
        queue = plan.queues[(node_index, binding.slot_index)]
        pin = f"gpu {binding.gpu_index}" if binding.gpu_index is not None else "no gpu"
        lines.append(f"# slot {binding.slot_index}: {pin}, {len(queue)} task(s)")
        lines.append("(")
        for name, value in binding.env:
            if not _ENV_NAME_RE.match(name):
                raise ValueError(f"bad env name {name!r}")
            lines.append(f"  export {name}={shlex.quote(value)}")
        if not queue:
            lines.append("  :")
        for task in queue:
            prefix = "".join(f"{k}={shlex.quote(v)} " for k, v in task.extra_env)
            cmd = " ".join(shlex.quote(a) for a in task.argv)
            lines.append(
                f'  {prefix}{cmd} >"$log_dir/task_{task.task_id}.out"'
                f' 2>"$log_dir/task_{task.task_id}.err"'
            )
        lines.append(") &")
        lines.append("")
    lines.append("wait")
    return "\n".join(lines) + "\n"


def load_workload(path) -> list[TaskDef]:
    """Read a workload file.

    *.jsonl / *.json: one JSON object per line with keys ``argv`` (required),
    ``task_id`` (defaults to the line's position), and ``env`` (object or
    list of pairs). Anything else: one command per line, tokenized with
    shell rules; blank lines and '#' comments are skipped.
    """
    p = Path(path)
    text = p.read_text()
    if p.suffix in (".jsonl", ".json"):
        return parse_workload_jsonl(text)
    return parse_workload_text(text)


def parse_workload_text(text: str) -> list[TaskDef]:
    tasks = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tasks.append(TaskDef(task_id=len(tasks), argv=tuple(shlex.split(line))))
    return tasks


def parse_workload_jsonl(text: str) -> list[TaskDef]:
    tasks = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        env = obj.get("env") or ()
        if isinstance(env, dict):
            env = tuple(env.items())
        tasks.append(
            TaskDef(
                task_id=int(obj.get("task_id", len(tasks))),
                argv=tuple(obj["argv"]),
                extra_env=tuple((k, v) for k, v in env),
            )
        )
    return tasks
