"""Slot grids for triples-mode launches: validation, expansion, GPU pinning.

A triple (NNODE, NPPN, NTPP) lays out NNODE x NPPN process slots with NTPP
threads each. Slots are pinned to GPUs cyclically (slot mod gpus) and every
slot carries its placement as environment variables, so generated scripts
and the native executor agree on the task-to-device mapping.
"""

from dataclasses import dataclass

DEVICE_VISIBILITY_VAR = "CUDA_VISIBLE_DEVICES"
THREAD_COUNT_VAR = "OMP_NUM_THREADS"
NODE_INDEX_VAR = "TRILAUNCH_NODE_INDEX"
SLOT_INDEX_VAR = "TRILAUNCH_SLOT_INDEX"
SLOT_COUNT_VAR = "TRILAUNCH_SLOT_COUNT"

OK = "ok"
WARNING = "warning"
ERROR = "error"


class TripleError(ValueError):
    """A triple that cannot be laid out on the given node."""


class NonPositiveField(TripleError):
    """One of NNODE/NPPN/NTPP is below 1."""


class CpuOversubscribed(TripleError):
    """nppn x ntpp exceeds the node's physical cores under strict policy."""


class NoGpu(ValueError):
    """GPU assignment requested on a node without GPUs."""


@dataclass(frozen=True)
class TripleSpec:
    """Layout triple: node count, processes per node, threads per process.

    Construction is permissive; ``validate_triple`` is the gate that enforces
    field positivity and the CPU budget.
    """

    nnode: int
    nppn: int
    ntpp: int

    @property
    def total_processes(self) -> int:
        return self.nnode * self.nppn

    @classmethod
    def parse(cls, text: str) -> "TripleSpec":
        parts = text.split(",")
        if len(parts) != 3:
            raise ValueError(f"expected NNODE,NPPN,NTPP, got {text!r}")
        nnode, nppn, ntpp = (int(p.strip()) for p in parts)
        return cls(nnode, nppn, ntpp)

    def __str__(self) -> str:
        return f"({self.nnode},{self.nppn},{self.ntpp})"


@dataclass(frozen=True)
class NodeSpec:
    """Physical compute-node description: cores, devices, per-device memory."""

    cores: int
    gpus: int = 0
    gpu_mem_mib: int = 0

    def __post_init__(self):
        if self.cores < 1:
            raise ValueError("cores must be >= 1")
        if self.gpus < 0:
            raise ValueError("gpus must be >= 0")
        if self.gpus > 0 and self.gpu_mem_mib <= 0:
            raise ValueError("gpu_mem_mib must be > 0 on a node with GPUs")


@dataclass(frozen=True)
class EnvNames:
    """Names of the variables exported into each slot's environment.

    Defaults follow the conventional device-visibility and thread-count
    names; override to stay vendor-neutral.
    """

    device: str = DEVICE_VISIBILITY_VAR
    threads: str = THREAD_COUNT_VAR
    node_index: str = NODE_INDEX_VAR
    slot_index: str = SLOT_INDEX_VAR
    slot_count: str = SLOT_COUNT_VAR


DEFAULT_ENV_NAMES = EnvNames()


@dataclass(frozen=True)
class SlotBinding:
    """One process slot: its position on the grid, device pin, and environment."""

    node_index: int
    slot_index: int
    gpu_index: int | None
    thread_count: int
    env: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class Verdict:
    """Outcome of validate_triple: ok, warnings, or a held (unraised) error."""

    status: str
    warnings: tuple[str, ...] = ()
    error: TripleError | None = None

    @property
    def passed(self) -> bool:
        return self.status != ERROR

    def raise_for_error(self) -> None:
        if self.error is not None:
            raise self.error


def validate_triple(triple: TripleSpec, node: NodeSpec, strict: bool = False) -> Verdict:
    """Check a triple against a node's CPU budget.

    Non-positive fields are always an error. nppn x ntpp > cores is an
    error under ``strict``, otherwise a warning: the cores rule is sizing
    guidance, not a hard constraint.
    """
    if min(triple.nnode, triple.nppn, triple.ntpp) < 1:
        return Verdict(ERROR, error=NonPositiveField(f"triple fields must be >= 1, got {triple}"))
    threads = triple.nppn * triple.ntpp
    if threads > node.cores:
        msg = f"nppn x ntpp = {threads} exceeds {node.cores} physical cores"
        if strict:
            return Verdict(ERROR, error=CpuOversubscribed(msg))
        return Verdict(WARNING, warnings=(msg,))
    return Verdict(OK)


def assign_gpu(slot_index: int, gpus: int) -> int:
    """Cyclic slot-to-device mapping; per-GPU slot counts differ by at most 1."""
    if gpus < 1:
        raise NoGpu("node has no GPUs to assign")
    if slot_index < 0:
        raise ValueError("slot_index must be >= 0")
    return slot_index % gpus


def expand_slots(
    triple: TripleSpec, node: NodeSpec, names: EnvNames = DEFAULT_ENV_NAMES
) -> list[SlotBinding]:
    """All nnode x nppn slot bindings, ordered by (node_index, slot_index)."""
    validate_triple(triple, node).raise_for_error()
    total = triple.total_processes
    bindings = []
    for node_index in range(triple.nnode):
        for slot_index in range(triple.nppn):
            gpu = assign_gpu(slot_index, node.gpus) if node.gpus > 0 else None
            env = _slot_env(node_index, slot_index, total, gpu, triple.ntpp, names)
            bindings.append(SlotBinding(node_index, slot_index, gpu, triple.ntpp, env))
    return bindings


def _slot_env(node_index, slot_index, total_slots, gpu_index, threads, names):
    pairs = []
    if gpu_index is not None:
        pairs.append((names.device, str(gpu_index)))
    pairs.append((names.threads, str(threads)))
    pairs.append((names.node_index, str(node_index)))
    pairs.append((names.slot_index, str(slot_index)))
    pairs.append((names.slot_count, str(total_slots)))
    return tuple(pairs)


def render_env(binding: SlotBinding) -> list[tuple[str, str]]:
    """The slot's environment as an ordered (name, value) list.

    Order is fixed: device visibility (when pinned), thread count, then the
    slot-identity variables.
    """
    return list(binding.env)
