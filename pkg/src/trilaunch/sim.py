"""Discrete-event model of tasks sharing GPUs under a slot grid.

Each slot drains its queue sequentially; co-resident tasks on one device
all run, but at rate 1/slowdown(k) where k counts the tasks currently
sharing that device (itself included). Device memory is claimed at the
instant a task would start: if the request exceeds the free capacity the
task fails on the spot and its slot moves on to the next task. Under the
unit slowdown model every task takes exactly its base duration, so T
tasks on S slots finish at ceil(T/S) * base.

Device utilization is modeled as 1 - (1 - duty)**k for k resident tasks,
where duty is the busy fraction a single task sustains alone; duty=1
makes a device fully busy whenever anything runs on it.
"""

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from heapq import heappop, heappush

from .core import NodeSpec, TripleSpec
from .plan import LaunchPlan, TaskDef, build_plan
from .telemetry import GpuReading, TelemetrySample, TelemetrySeries

STATUS_DONE = "done"
STATUS_OOM = "oom"

# slack when comparing event times, well below any meaningful duration
_TIME_EPS = 1e-9

SLOWDOWN_REGISTRY: dict = {}


def register_slowdown(name: str):
    def deco(factory):
        SLOWDOWN_REGISTRY[name] = factory
        return factory

    return deco


@register_slowdown("none")
def _none_slowdown():
    return lambda k: 1.0


@register_slowdown("table")
def _table_slowdown(table):
    """Piecewise-linear through measured (k, slowdown) points, clamped outside."""
    points = sorted((int(k), float(v)) for k, v in table.items())
    if not points:
        raise ValueError("table slowdown needs at least one point")
    ks = [k for k, _ in points]
    vs = [v for _, v in points]
    if ks[0] < 1:
        raise ValueError("table keys must be concurrency counts >= 1")
    if len(set(ks)) != len(ks):
        raise ValueError("table keys must be distinct")

    def f(k: int) -> float:
        if k <= ks[0]:
            return vs[0]
        if k >= ks[-1]:
            return vs[-1]
        i = bisect_right(ks, k) - 1
        frac = (k - ks[i]) / (ks[i + 1] - ks[i])
        return vs[i] + frac * (vs[i + 1] - vs[i])

    return f


@register_slowdown("saturating")
def _saturating_slowdown(capacity):
    """No penalty up to `capacity` co-resident tasks, proportional beyond."""
    c = float(capacity)
    if c < 1:
        raise ValueError(f"capacity must be >= 1, got {capacity}")
    return lambda k: max(1.0, k / c)


def make_slowdown(name: str, **params):
    try:
        factory = SLOWDOWN_REGISTRY[name]
    except KeyError:
        raise ValueError(
            f"unknown slowdown model {name!r}; known: {sorted(SLOWDOWN_REGISTRY)}"
        ) from None
    fn = factory(**params)
    _check_slowdown(fn)
    return fn


def _check_slowdown(fn) -> None:
    """A lone task must run at full speed and crowding must never help."""
    v = fn(1)
    if abs(v - 1.0) > 1e-12:
        raise ValueError(f"slowdown(1) must equal 1, got {v}")
    prev = v
    for k in range(2, 65):
        cur = fn(k)
        if cur < prev - 1e-12:
            raise ValueError(f"slowdown must be non-decreasing, drops at k={k}")
        prev = cur


@dataclass(frozen=True)
class SimTaskProfile:
    """Per-task model inputs; one profile applies to the whole workload.

    duty is the busy fraction a lone task keeps its device at; startup_s
    delays device residency after a slot picks the task up, which is when
    the memory check happens.
    """

    base_duration_s: float
    mem_mib: int
    slowdown: object = field(default=None)
    duty: float = 1.0
    startup_s: float = 0.0

    def __post_init__(self):
        if self.slowdown is None:
            object.__setattr__(self, "slowdown", _none_slowdown())
        if not self.base_duration_s > 0:
            raise ValueError(f"base_duration_s must be positive, got {self.base_duration_s}")
        object.__setattr__(self, "mem_mib", int(self.mem_mib))
        if self.mem_mib < 1:
            raise ValueError(f"mem_mib must be >= 1, got {self.mem_mib}")
        if not 0.0 < self.duty <= 1.0:
            raise ValueError(f"duty must be in (0, 1], got {self.duty}")
        if self.startup_s < 0:
            raise ValueError(f"startup_s must be >= 0, got {self.startup_s}")
        _check_slowdown(self.slowdown)


def profile_from_config(cfg: dict) -> SimTaskProfile:
    """Build a profile from plain JSON-style keys.

    Recognized keys: base_duration_s, mem_mib, slowdown (model name),
    table ({k: slowdown} for the table model), capacity (for saturating),
    duty, startup_s.
    """
    name = cfg.get("slowdown", "none")
    params = {}
    if name == "table":
        params["table"] = {int(k): float(v) for k, v in cfg.get("table", {}).items()}
    elif name == "saturating":
        params["capacity"] = cfg.get("capacity", 1)
    return SimTaskProfile(
        base_duration_s=float(cfg.get("base_duration_s", 1.0)),
        mem_mib=int(cfg.get("mem_mib", 1)),
        slowdown=make_slowdown(name, **params),
        duty=float(cfg.get("duty", 1.0)),
        startup_s=float(cfg.get("startup_s", 0.0)),
    )


class StepTrace:
    """Right-continuous step function sampled at event times.

    Starts at (0, 0). Appending at the current last time replaces the
    value, so several state changes at one instant collapse to the final
    state. The last value extends to infinity.
    """

    def __init__(self):
        self.times: list[float] = [0.0]
        self.values: list[float] = [0.0]

    def append(self, t: float, value: float) -> None:
        last = self.times[-1]
        if t < last - _TIME_EPS:
            raise ValueError(f"time {t} precedes trace end {last}")
        if t <= last + _TIME_EPS:
            self.values[-1] = value
            return
        self.times.append(t)
        self.values.append(value)

    def value_at(self, t: float) -> float:
        i = bisect_right(self.times, t) - 1
        return self.values[max(i, 0)]

    def integral(self, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        parts = []
        for i, t0 in enumerate(self.times):
            t1 = self.times[i + 1] if i + 1 < len(self.times) else math.inf
            lo = max(a, t0)
            hi = min(b, t1)
            if hi > lo:
                parts.append(self.values[i] * (hi - lo))
        return math.fsum(parts)

    def mean(self, a: float, b: float) -> float:
        if b <= a:
            return self.value_at(a)
        return self.integral(a, b) / (b - a)

    def bounds(self, a: float, b: float) -> tuple[float, float]:
        """(min, max) over [a, b); for a == b, the value at a twice."""
        lo = hi = self.value_at(a)
        for i, t0 in enumerate(self.times):
            t1 = self.times[i + 1] if i + 1 < len(self.times) else math.inf
            if t1 > a and t0 < b:
                lo = min(lo, self.values[i])
                hi = max(hi, self.values[i])
        return lo, hi


def sum_traces(traces) -> StepTrace:
    traces = list(traces)
    out = StepTrace()
    times = sorted({t for tr in traces for t in tr.times})
    for t in times:
        out.append(t, sum(tr.value_at(t) for tr in traces))
    return out


@dataclass(frozen=True)
class SimTaskOutcome:
    task_id: int
    node_index: int
    slot_index: int
    gpu: int
    start_s: float
    end_s: float
    status: str

    def to_json_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "node_index": self.node_index,
            "slot_index": self.slot_index,
            "gpu": self.gpu,
            "start_s": self.start_s,
            "end_s": self.end_s,
            "status": self.status,
        }


def _device_util(k: int, duty: float) -> float:
    if k <= 0:
        return 0.0
    if duty >= 1.0:
        return 1.0
    return 1.0 - (1.0 - duty) ** k


@dataclass(frozen=True)
class SimOutcome:
    """Everything the simulation produced: per-task outcomes plus traces.

    gpu_util and gpu_mem are indexed node_index * gpus + device; on a
    single node that is just the device index.
    """

    triple: TripleSpec
    node: NodeSpec
    tasks: tuple[SimTaskOutcome, ...]
    total_elapsed_s: float
    gpu_util: tuple[StepTrace, ...]
    gpu_mem: tuple[StepTrace, ...]
    active_procs: StepTrace
    peak_gpu_mem_mib: int

    @property
    def failures(self) -> int:
        return sum(1 for t in self.tasks if t.status != STATUS_DONE)

    @property
    def completed(self) -> int:
        return sum(1 for t in self.tasks if t.status == STATUS_DONE)

    def node_gpu_load(self) -> StepTrace:
        return sum_traces(self.gpu_util)

    def node_gpu_mem(self) -> StepTrace:
        return sum_traces(self.gpu_mem)

    def to_json_dict(self) -> dict:
        end = self.total_elapsed_s
        load = self.node_gpu_load()
        mem = self.node_gpu_mem()
        load_lo, load_hi = load.bounds(0.0, end)
        mem_lo, mem_hi = mem.bounds(0.0, end)
        # keep averages inside the observed extremes despite rounding noise
        load_avg = min(max(load.mean(0.0, end), load_lo), load_hi)
        mem_avg = min(max(mem.mean(0.0, end), mem_lo), mem_hi)
        return {
            "triple": {"nnode": self.triple.nnode, "nppn": self.triple.nppn, "ntpp": self.triple.ntpp},
            "node": {"cores": self.node.cores, "gpus": self.node.gpus, "gpu_mem_mib": self.node.gpu_mem_mib},
            "total_elapsed_s": self.total_elapsed_s,
            "tasks_done": self.completed,
            "tasks_oom": self.failures,
            "peak_gpu_mem_mib": self.peak_gpu_mem_mib,
            "gpu_load": {"min": load_lo, "avg": load_avg, "max": load_hi},
            "gpu_mem_mib": {"min": mem_lo, "avg": mem_avg, "max": mem_hi},
            "tasks": [t.to_json_dict() for t in self.tasks],
        }


class _Running:
    __slots__ = ("rem", "slot_key", "gpu_key", "gpu_index", "launch_t")

    def __init__(self, rem, slot_key, gpu_key, gpu_index, launch_t):
        self.rem = rem
        self.slot_key = slot_key
        self.gpu_key = gpu_key
        self.gpu_index = gpu_index
        self.launch_t = launch_t


def simulate(plan: LaunchPlan, profile: SimTaskProfile, node: NodeSpec | None = None) -> SimOutcome:
    """Run the plan to completion in virtual time.

    `node` overrides the plan's node (same grid on different hardware);
    device pinning is recomputed as slot_index mod gpus either way. Ties
    at one instant resolve completions before admissions, so memory freed
    by a finishing task is available to a task starting at the same time;
    within each group, lowest task_id goes first.
    """
    node = node or plan.node
    if node.gpus < 1:
        raise ValueError("simulation needs a node with at least one device")
    ngpu = node.gpus
    capacity = node.gpu_mem_mib
    ndev = plan.triple.nnode * ngpu

    cursor = {key: 0 for key in plan.queues}
    pending: list = []
    running: dict = {}
    device_tasks = {g: set() for g in range(ndev)}
    device_free = {g: capacity for g in range(ndev)}
    util_traces = tuple(StepTrace() for _ in range(ndev))
    mem_traces = tuple(StepTrace() for _ in range(ndev))
    active_trace = StepTrace()
    outcomes: list[SimTaskOutcome] = []
    active = 0
    peak_mem = 0
    t = 0.0

    def launch(slot_key, now):
        nonlocal active
        queue = plan.queues[slot_key]
        i = cursor[slot_key]
        if i >= len(queue):
            return
        cursor[slot_key] = i + 1
        heappush(pending, (now + profile.startup_s, queue[i].task_id, slot_key, now))
        active += 1

    for key in sorted(plan.queues):
        launch(key, 0.0)
    active_trace.append(0.0, float(active))

    while running or pending:
        if running:
            k_of = {g: len(members) for g, members in device_tasks.items() if members}
            fins = {
                tid: t + st.rem * profile.slowdown(k_of[st.gpu_key])
                for tid, st in running.items()
            }
            next_fin = min(fins.values())
        else:
            k_of, fins, next_fin = {}, {}, math.inf
        next_admit = pending[0][0] if pending else math.inf
        t_next = min(next_fin, next_admit)
        dt = t_next - t
        if dt > 0 and running:
            for st in running.values():
                st.rem -= dt / profile.slowdown(k_of[st.gpu_key])
        t = t_next

        changed = set()
        for tid in sorted(tid for tid, fin in fins.items() if fin <= t + _TIME_EPS):
            st = running.pop(tid)
            device_tasks[st.gpu_key].remove(tid)
            device_free[st.gpu_key] += profile.mem_mib
            outcomes.append(
                SimTaskOutcome(tid, st.slot_key[0], st.slot_key[1], st.gpu_index, st.launch_t, t, STATUS_DONE)
            )
            active -= 1
            changed.add(st.gpu_key)
            launch(st.slot_key, t)

        while pending and pending[0][0] <= t + _TIME_EPS:
            _, tid, slot_key, launch_t = heappop(pending)
            gpu_index = slot_key[1] % ngpu
            gpu_key = slot_key[0] * ngpu + gpu_index
            if profile.mem_mib <= device_free[gpu_key]:
                device_free[gpu_key] -= profile.mem_mib
                device_tasks[gpu_key].add(tid)
                running[tid] = _Running(profile.base_duration_s, slot_key, gpu_key, gpu_index, launch_t)
                changed.add(gpu_key)
            else:
                outcomes.append(
                    SimTaskOutcome(tid, slot_key[0], slot_key[1], gpu_index, launch_t, t, STATUS_OOM)
                )
                active -= 1
                launch(slot_key, t)

        for g in sorted(changed):
            k = len(device_tasks[g])
            util_traces[g].append(t, _device_util(k, profile.duty))
            resident = capacity - device_free[g]
            mem_traces[g].append(t, float(resident))
            peak_mem = max(peak_mem, resident)
        active_trace.append(t, float(active))

    return SimOutcome(
        triple=plan.triple,
        node=node,
        tasks=tuple(sorted(outcomes, key=lambda o: o.task_id)),
        total_elapsed_s=t,
        gpu_util=util_traces,
        gpu_mem=mem_traces,
        active_procs=active_trace,
        peak_gpu_mem_mib=peak_mem,
    )


def _as_tasks(tasks) -> list[TaskDef]:
    if isinstance(tasks, int):
        return [TaskDef(task_id=i, argv=("true",)) for i in range(tasks)]
    return list(tasks)


def sweep_outcomes(
    tasks,
    profile: SimTaskProfile,
    node: NodeSpec,
    nppn_list,
    *,
    nnode: int = 1,
    ntpp_for=None,
) -> list[SimOutcome]:
    """Simulate the same workload at each process count.

    ntpp defaults to max(1, cores // nppn) so the grid keeps using the
    whole node as processes are added; pass ntpp_for to override.
    """
    tasks = _as_tasks(tasks)
    outcomes = []
    for nppn in sorted(set(int(n) for n in nppn_list)):
        ntpp = ntpp_for(nppn) if ntpp_for is not None else max(1, node.cores // nppn)
        triple = TripleSpec(nnode=nnode, nppn=nppn, ntpp=ntpp)
        plan = build_plan(tasks, triple, node)
        outcomes.append(simulate(plan, profile))
    return outcomes


@dataclass(frozen=True)
class SweepRow:
    nppn: int
    elapsed_s: float
    speedup: float
    avg_gpu_load: float


def sweep(tasks, profile, node, nppn_list, *, nnode=1, ntpp_for=None) -> list[SweepRow]:
    """Speedup table over process counts, normalized to the smallest one."""
    outcomes = sweep_outcomes(tasks, profile, node, nppn_list, nnode=nnode, ntpp_for=ntpp_for)
    base = outcomes[0].total_elapsed_s
    rows = []
    for oc in outcomes:
        elapsed = oc.total_elapsed_s
        rows.append(
            SweepRow(
                nppn=oc.triple.nppn,
                elapsed_s=elapsed,
                speedup=base / elapsed if elapsed > 0 else math.inf,
                avg_gpu_load=oc.node_gpu_load().mean(0.0, elapsed),
            )
        )
    return rows


def synthetic_trace(outcome: SimOutcome, interval_s: float) -> TelemetrySeries:
    """What a periodic sampler would have seen during the simulated run.

    Sample i lands at i * interval_s and reports averages over the
    preceding interval, the way counter-based monitors do, so activity
    briefer than one interval shows up as a partial dip rather than
    disappearing. cpu_load carries the mean in-flight process count and
    sys_mem_mib is reported as 0.
    """
    if outcome.triple.nnode != 1:
        raise ValueError("synthetic traces cover single-node runs only")
    if interval_s <= 0:
        raise ValueError(f"interval_s must be positive, got {interval_s}")
    n = math.ceil(outcome.total_elapsed_s / interval_s - 1e-12)
    series = TelemetrySeries()
    for i in range(1, n + 1):
        tick_t = i * interval_s
        a = tick_t - interval_s
        gpu = []
        for g in range(outcome.node.gpus):
            util = outcome.gpu_util[g].mean(a, tick_t)
            mem = outcome.gpu_mem[g].mean(a, tick_t)
            gpu.append(GpuReading(util=min(max(util, 0.0), 1.0), mem_mib=int(round(mem))))
        series.samples.append(
            TelemetrySample(
                t=tick_t,
                cpu_load=outcome.active_procs.mean(a, tick_t),
                sys_mem_mib=0,
                gpu=tuple(gpu),
            )
        )
    return series
