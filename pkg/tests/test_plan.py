import math
import subprocess
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trilaunch.core import CpuOversubscribed, NodeSpec, TripleSpec
from trilaunch.plan import (
    BadNodeIndex,
    EmptyWorkload,
    TaskDef,
    build_plan,
    emit_script,
    load_workload,
    plan_summary,
)

NODE = NodeSpec(cores=40, gpus=2, gpu_mem_mib=32768)


def make_tasks(n):
    return [TaskDef(task_id=i, argv=("true",)) for i in range(n)]


def test_single_slot_gets_everything():
    plan = build_plan(make_tasks(24), TripleSpec(1, 1, 40), NODE)
    assert plan.total_tasks == 24
    queue = plan.queue_for(0, 0)
    assert [t.task_id for t in queue] == list(range(24))


def test_two_slots_split_evenly():
    plan = build_plan(make_tasks(24), TripleSpec(1, 2, 20), NODE)
    q0 = plan.queue_for(0, 0)
    q1 = plan.queue_for(0, 1)
    assert len(q0) == len(q1) == 12
    assert [t.task_id for t in q0] == list(range(0, 24, 2))
    assert [t.task_id for t in q1] == list(range(1, 24, 2))


def test_dealing_is_cyclic():
    plan = build_plan(make_tasks(10), TripleSpec(1, 4, 1), NodeSpec(cores=8))
    for i in range(10):
        queue = plan.queue_for(0, i % 4)
        assert i in [t.task_id for t in queue]


def test_empty_workload_rejected():
    with pytest.raises(EmptyWorkload):
        build_plan([], TripleSpec(1, 1, 1), NODE)


def test_duplicate_task_ids_rejected():
    tasks = [TaskDef(0, ("true",)), TaskDef(0, ("false",))]
    with pytest.raises(ValueError):
        build_plan(tasks, TripleSpec(1, 1, 1), NODE)


def test_strict_oversubscription_blocks_plan():
    with pytest.raises(CpuOversubscribed):
        build_plan(make_tasks(4), TripleSpec(1, 8, 6), NODE, strict=True)
    build_plan(make_tasks(4), TripleSpec(1, 8, 6), NODE)  # default only warns


def test_task_def_rejects_empty_argv():
    with pytest.raises(ValueError):
        TaskDef(task_id=0, argv=())


@given(T=st.integers(1, 200), S=st.integers(1, 64))
@settings(max_examples=80, deadline=None)
def test_dealing_partitions_workload(T, S):
    node = NodeSpec(cores=64, gpus=2, gpu_mem_mib=1024)
    plan = build_plan(make_tasks(T), TripleSpec(1, S, 1), node)
    seen = [t.task_id for q in plan.queues.values() for t in q]
    assert sorted(seen) == list(range(T))
    lengths = {len(q) for q in plan.queues.values()}
    assert lengths <= {T // S, math.ceil(T / S)}


def test_plan_summary_contents():
    plan = build_plan(make_tasks(10), TripleSpec(1, 4, 2), NODE)
    summary = plan_summary(plan)
    assert summary.total_slots == 4
    assert summary.total_tasks == 10
    assert summary.queue_lengths == (3, 3, 2, 2)
    assert summary.gpu_slot_counts == {0: 2, 1: 2}
    d = summary.to_json_dict()
    assert d["triple"] == {"nnode": 1, "nppn": 4, "ntpp": 2}
    assert d["queue_lengths"] == [3, 3, 2, 2]
    assert d["gpu_slot_counts"] == {"0": 2, "1": 2}


def test_emit_script_is_deterministic():
    plan = build_plan(make_tasks(9), TripleSpec(1, 4, 2), NODE)
    assert emit_script(plan, 0) == emit_script(plan, 0)


def test_emit_script_structure():
    tasks = [TaskDef(i, ("echo", f"t{i}")) for i in range(5)]
    plan = build_plan(tasks, TripleSpec(1, 2, 3), NODE)
    script = emit_script(plan, 0)
    assert script.startswith("#!/bin/sh\n")
    assert script.endswith("wait\n")
    assert 'log_dir="${TRILAUNCH_LOG_DIR:-trilaunch_logs}"' in script
    assert "  export CUDA_VISIBLE_DEVICES=0" in script
    assert "  export CUDA_VISIBLE_DEVICES=1" in script
    assert "  export OMP_NUM_THREADS=3" in script
    assert script.count(") &") == 2
    assert '  echo t0 >"$log_dir/task_0.out" 2>"$log_dir/task_0.err"' in script


def test_emit_script_idle_slot_placeholder():
    plan = build_plan(make_tasks(1), TripleSpec(1, 3, 1), NODE)
    script = emit_script(plan, 0)
    assert script.count("\n  :\n") == 2


def test_emit_script_selects_node():
    plan = build_plan(make_tasks(8), TripleSpec(2, 2, 1), NODE)
    s0 = emit_script(plan, 0)
    s1 = emit_script(plan, 1)
    assert "task_0.out" in s0 and "task_0.out" not in s1
    assert "TRILAUNCH_NODE_INDEX=1" in s1 and "TRILAUNCH_NODE_INDEX=1" not in s0
    with pytest.raises(BadNodeIndex):
        emit_script(plan, 2)


def test_emit_script_quotes_arguments(tmp_path):
    tricky = "a b'c\"d$e"
    tasks = [TaskDef(0, ("printf", "%s", tricky), extra_env=(("PROBE_VALUE", "x y"),))]
    plan = build_plan(tasks, TripleSpec(1, 1, 1), NodeSpec(cores=4))
    script_path = tmp_path / "run.sh"
    script_path.write_text(emit_script(plan, 0))
    subprocess.run(
        ["sh", str(script_path)],
        cwd=tmp_path,
        env={"PATH": "/usr/bin:/bin", "TRILAUNCH_LOG_DIR": str(tmp_path / "logs")},
        check=True,
    )
    assert (tmp_path / "logs" / "task_0.out").read_text() == tricky


def test_emit_script_runs_queues_sequentially(tmp_path):
    tasks = [TaskDef(i, ("sh", "-c", f"echo {i} >> order.txt")) for i in range(4)]
    plan = build_plan(tasks, TripleSpec(1, 1, 1), NodeSpec(cores=4))
    script_path = tmp_path / "run.sh"
    script_path.write_text(emit_script(plan, 0))
    subprocess.run(["sh", str(script_path)], cwd=tmp_path, env={"PATH": "/usr/bin:/bin"}, check=True)
    assert (tmp_path / "order.txt").read_text() == "0\n1\n2\n3\n"


def test_load_workload_text(tmp_path):
    path = tmp_path / "tasks.txt"
    path.write_text("echo one\n\n# skip me\nsleep '2 3'\n")
    tasks = load_workload(path)
    assert len(tasks) == 2
    assert tasks[0].argv == ("echo", "one")
    assert tasks[1].argv == ("sleep", "2 3")
    assert [t.task_id for t in tasks] == [0, 1]


def test_load_workload_jsonl(tmp_path):
    path = tmp_path / "tasks.jsonl"
    path.write_text(
        '{"argv": ["echo", "a"]}\n'
        '{"task_id": 7, "argv": ["true"], "env": {"SEED": "42"}}\n'
    )
    tasks = load_workload(path)
    assert tasks[0].task_id == 0 and tasks[0].argv == ("echo", "a")
    assert tasks[1].task_id == 7
    assert tasks[1].extra_env == (("SEED", "42"),)
