"""Brute-force reference simulator used to cross-check the closed-form queue timing.

Nothing here is shared with :mod:`simcore` or :mod:`edge`: every queue is a
plain list of ``[task, remaining_bits]`` pairs drained slot by slot with an
explicit bit budget.  The edge completion slots are additionally recomputed
from prefix sums of the per-slot service shares.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

TOL = 1e-6


@dataclass
class OracleTask:
    id: int
    device: int
    birth: int
    size: float
    deadline: int  # last slot the task may be worked on
    target: Optional[int]  # None = local, else edge index


@dataclass
class OracleOutcome:
    slot: int
    dropped: bool
    where: str
    edge_arrival: Optional[int] = None


class _Serial:
    """One FIFO server that starts a new task only at a slot boundary."""

    def __init__(self):
        self.queue: List[list] = []

    def push(self, task: OracleTask) -> None:
        self.queue.append([task, task.size])

    def serve(self, budget: float, t: int) -> Tuple[List[OracleTask], List[OracleTask]]:
        finished, dropped = [], []
        if self.queue:
            head = self.queue[0]
            head[1] -= budget
            if head[1] <= TOL:
                finished.append(self.queue.pop(0)[0])
        while self.queue and self.queue[0][0].deadline == t:
            dropped.append(self.queue.pop(0)[0])
        return finished, dropped


def simulate(tasks: List[OracleTask], *, M: int, N: int, T: int, local_bits: float, tran_bits: float,
             edge_cycles: float, density: float) -> Tuple[Dict[int, OracleOutcome], Dict[int, List[int]]]:
    """Run the whole system for ``T`` slots; returns per-task outcomes and per-edge active counts."""
    by_birth: Dict[int, List[OracleTask]] = {}
    for task in tasks:
        by_birth.setdefault(task.birth, []).append(task)
    comp = [_Serial() for _ in range(M)]
    tran = [_Serial() for _ in range(M)]
    edge = [[_Serial() for _ in range(M)] for _ in range(N)]
    pending: Dict[int, List[OracleTask]] = {}
    out: Dict[int, OracleOutcome] = {}
    load: Dict[int, List[int]] = {n: [] for n in range(N)}
    for t in range(1, T + 1):
        for task in by_birth.get(t, []):
            (comp if task.target is None else tran)[task.device].push(task)
        for task in pending.pop(t, []):
            edge[task.target][task.device].push(task)
            out[task.id] = OracleOutcome(0, False, "edge", edge_arrival=t)
        for m in range(M):
            done, drop = comp[m].serve(local_bits, t)
            for task in done:
                out[task.id] = OracleOutcome(t, False, "local")
            for task in drop:
                out[task.id] = OracleOutcome(t, True, "local")
            done, drop = tran[m].serve(tran_bits, t)
            for task in done:
                if t < task.deadline:
                    pending.setdefault(t + 1, []).append(task)
                else:
                    out[task.id] = OracleOutcome(t, True, "transmission")
            for task in drop:
                out[task.id] = OracleOutcome(t, True, "transmission")
        for n in range(N):
            active = [m for m in range(M) if edge[n][m].queue]
            load[n].append(len(active))
            for m in active:
                share = edge_cycles / (density * len(active))
                done, drop = edge[n][m].serve(share, t)
                for task in done:
                    out[task.id].slot = t
                for task in drop:
                    out[task.id].slot = t
                    out[task.id].dropped = True
    return out, load


def edge_finish_from_prefix_sums(edge_tasks: List[Tuple[int, float, int, int]], active_counts: List[int],
                                 edge_cycles: float, density: float, T: int) -> Dict[int, Optional[int]]:
    """Finish (or drop) slots for one device's queue at one edge from the active-count series.

    ``edge_tasks`` lists ``(task_id, size, arrival_slot, deadline_slot)`` in arrival order and
    ``active_counts[t - 1]`` is the number of active queues in slot ``t``.  A task starts at
    ``max(arrival, previous finish + 1)`` and finishes at the first slot whose cumulative share
    reaches its size; the deadline caps the result.  ``None`` marks tasks unresolved by ``T``.
    """
    prefix = [0.0]
    for count in active_counts:
        prefix.append(prefix[-1] + (edge_cycles / (density * count) if count else 0.0))
    result: Dict[int, Optional[int]] = {}
    prev = 0
    for tid, size, arrival, deadline in edge_tasks:
        start = max(arrival, prev + 1)
        finish = None
        for l in range(start, min(deadline, T) + 1):
            if prefix[l] - prefix[start - 1] >= size - TOL:
                finish = l
                break
        if finish is None and deadline <= T:
            finish = deadline
        result[tid] = finish
        if finish is None:
            prev = T
        else:
            prev = finish
    return result
