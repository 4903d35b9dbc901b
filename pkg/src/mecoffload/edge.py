"""Edge node queues with equal-share processor sharing.

An edge node keeps one FIFO queue per device.  In every slot the queues that
are active (non-empty at the end of the previous slot, or receiving a task
in this slot) split the node's cycle budget equally.  A device's share goes
to its head-of-line task only; when that task finishes, the next one starts
at the beginning of the following slot, so any unused share is lost.  Tasks
still unfinished at the end of their deadline slot are dropped.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Mapping, Set

import numpy as np

from .simcore import COMPLETION_TOL_BITS, Task


@dataclass
class InflightTask:
    task: Task
    remaining_bits: float
    arrival_slot: int
    start_slot: int = 0  # 0 until the task reaches the head of the queue

    @property
    def absolute_deadline_slot(self) -> int:
        return self.task.deadline_slot


@dataclass
class EdgeSlotResult:
    """What one device's queue experienced at an edge node during one slot."""

    allocated_bits: float = 0.0
    processed_bits: float = 0.0
    completed: List[Task] = field(default_factory=list)
    dropped: List[Task] = field(default_factory=list)
    dropped_bits: float = 0.0


class EdgeQueueState:
    """Per-device queues of a single edge node."""

    def __init__(self, n_devices: int, edge_capacity_cycles_per_slot: float):
        if edge_capacity_cycles_per_slot <= 0:
            raise ValueError("edge capacity must be positive")
        self.n_devices = n_devices
        self.edge_capacity_cycles_per_slot = float(edge_capacity_cycles_per_slot)
        self.inflight: List[Deque[InflightTask]] = [deque() for _ in range(n_devices)]
        self.queue_bits = np.zeros(n_devices)
        self.arrival_bits = np.zeros(n_devices)
        self._seen_ids: Set[int] = set()
        self.finish_slots: Dict[int, int] = {}
        self.start_slots: Dict[int, int] = {}

    def reset(self) -> None:
        for q in self.inflight:
            q.clear()
        self.queue_bits[:] = 0.0
        self.arrival_bits[:] = 0.0
        self._seen_ids.clear()
        self.finish_slots.clear()
        self.start_slots.clear()

    def check_consistency(self) -> None:
        for m, q in enumerate(self.inflight):
            total = sum(item.remaining_bits for item in q)
            if abs(total - self.queue_bits[m]) > 1e-9 * max(1.0, total):
                raise AssertionError(f"queue length of device {m} drifted from its task list")
            if self.queue_bits[m] < 0:
                raise AssertionError(f"negative queue length for device {m}")


def deliver(state: EdgeQueueState, task: Task, t: int) -> None:
    """Place a fully received task in its device's queue at the start of slot ``t``."""
    if task.id in state._seen_ids:
        raise ValueError(f"task {task.id} was already delivered to this edge node")
    if state.arrival_bits[task.device] > 0:
        raise ValueError(f"device {task.device} already delivered a task in slot {t}")
    state._seen_ids.add(task.id)
    state.inflight[task.device].append(InflightTask(task, task.size_bits, t))
    state.arrival_bits[task.device] = task.size_bits
    state.queue_bits[task.device] += task.size_bits


def active_set(state: EdgeQueueState, arrivals: Iterable[float], t: int) -> Set[int]:
    """Devices whose queue is active in slot ``t``.

    ``state.queue_bits`` must still hold the end-of-slot ``t-1`` lengths, i.e.
    exclude the bits in ``arrivals``.
    """
    arrivals = np.asarray(list(arrivals), dtype=float)
    prev = state.queue_bits - arrivals
    return {m for m in range(state.n_devices) if arrivals[m] > 0 or prev[m] > COMPLETION_TOL_BITS}


def step_edge(state: EdgeQueueState, t: int) -> Dict[int, EdgeSlotResult]:
    """Serve one slot; returns results for every active device."""
    active = active_set(state, state.arrival_bits, t)
    results: Dict[int, EdgeSlotResult] = {}
    b = len(active)
    for m in sorted(active):
        queue = state.inflight[m]
        res = EdgeSlotResult()
        if not queue:
            results[m] = res
            continue
        head = queue[0]
        share = state.edge_capacity_cycles_per_slot / (head.task.density_cycles_per_bit * b)
        res.allocated_bits = share
        if head.start_slot == 0:
            head.start_slot = t
            state.start_slots[head.task.id] = t
        used = min(share, head.remaining_bits)
        head.remaining_bits -= used
        res.processed_bits = used
        if head.remaining_bits <= COMPLETION_TOL_BITS:
            queue.popleft()
            res.completed.append(head.task)
            state.finish_slots[head.task.id] = t
        # Whole tasks whose deadline ends with this slot are dropped.
        while queue and queue[0].absolute_deadline_slot <= t:
            item = queue.popleft()
            res.dropped.append(item.task)
            res.dropped_bits += item.remaining_bits
            state.finish_slots[item.task.id] = t
        state.queue_bits[m] = sum(item.remaining_bits for item in queue)
        results[m] = res
    state.arrival_bits[:] = 0.0
    return results


class LoadHistory:
    """Ring buffer of per-edge active-queue counts for the last ``t_step`` slots."""

    def __init__(self, t_step: int, n_edges: int, n_devices: int):
        if t_step < 1:
            raise ValueError("t_step must be positive")
        self.t_step = t_step
        self.n_edges = n_edges
        self.n_devices = n_devices
        self.counts: Deque[np.ndarray] = deque(maxlen=t_step)

    def reset(self) -> None:
        self.counts.clear()

    def matrix(self) -> np.ndarray:
        """``t_step x n_edges`` matrix, oldest row first, zero-padded before the episode start."""
        out = np.zeros((self.t_step, self.n_edges))
        k = len(self.counts)
        if k:
            out[self.t_step - k:] = np.stack(self.counts)
        return out

    def latest(self) -> np.ndarray:
        return self.counts[-1].copy() if self.counts else np.zeros(self.n_edges)


def record_load(history: LoadHistory, counts: Mapping[int, int] | Iterable[int]) -> None:
    if isinstance(counts, Mapping):
        row = np.array([counts.get(n, 0) for n in range(history.n_edges)], dtype=float)
    else:
        row = np.asarray(list(counts), dtype=float)
    if row.shape != (history.n_edges,):
        raise ValueError(f"expected {history.n_edges} load counts, got {row.shape}")
    if np.any(row < 0) or np.any(row > history.n_devices):
        raise ValueError("active-queue counts must lie in [0, M]")
    history.counts.append(row)
