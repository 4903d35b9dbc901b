"""Per-device decision process on top of the slotted device/edge simulation.

Within slot ``t`` the protocol is::

    obs = env.observe(m)            # for every device
    env.apply_action(m, choice)     # for devices with an arrival
    events = env.step_world()       # advance devices and edges, collect costs

``step_world`` returns, per device, one :class:`CostEvent` for every task
that was processed or dropped during the slot.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import edge as edgecore
from .config import ARRIVALS, RunConfig, substream
from .simcore import (ArrivalProcess, DeviceTimeline, Task, comp_outcome, comp_wait, draw_arrival,
                      tran_outcome, tran_wait)


@dataclass
class Observation:
    task_size_bits: float
    comp_wait_slots: int
    tran_wait_slots: int
    edge_queue_bits: np.ndarray  # (N,)
    load_history: np.ndarray  # (t_step, N), oldest row first

    @property
    def has_task(self) -> bool:
        return self.task_size_bits > 0

    @classmethod
    def zeros(cls, n_edges: int, t_step: int) -> "Observation":
        return cls(0.0, 0, 0, np.zeros(n_edges), np.zeros((t_step, n_edges)))

    def scalars(self) -> np.ndarray:
        return np.concatenate(([self.task_size_bits, self.comp_wait_slots, self.tran_wait_slots],
                               self.edge_queue_bits))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (self.task_size_bits == other.task_size_bits
                and self.comp_wait_slots == other.comp_wait_slots
                and self.tran_wait_slots == other.tran_wait_slots
                and np.array_equal(self.edge_queue_bits, other.edge_queue_bits)
                and np.array_equal(self.load_history, other.load_history))


@dataclass(frozen=True)
class ActionChoice:
    """Local processing, or offloading to exactly one edge node."""

    local: bool
    edge_choice: Optional[int] = None

    def __post_init__(self):
        if self.local and self.edge_choice is not None:
            raise ValueError("a locally processed task cannot also name an edge node")
        if not self.local and self.edge_choice is None:
            raise ValueError("an offloaded task must name exactly one edge node")

    @property
    def index(self) -> int:
        return 0 if self.local else 1 + self.edge_choice

    @classmethod
    def from_index(cls, idx: int, n_edges: int) -> "ActionChoice":
        if not 0 <= idx <= n_edges:
            raise ValueError(f"action index {idx} outside 0..{n_edges}")
        return cls(True) if idx == 0 else cls(False, idx - 1)

    def as_vector(self, n_edges: int) -> Tuple[int, ...]:
        """The ``(x, y_1..y_N)`` binary encoding."""
        y = [0] * n_edges
        if not self.local:
            y[self.edge_choice] = 1
        return (int(self.local), *y)


def all_actions(n_edges: int) -> List[ActionChoice]:
    return [ActionChoice.from_index(i, n_edges) for i in range(n_edges + 1)]


@dataclass(frozen=True)
class CostEvent:
    device: int
    task_id: int
    birth_slot: int
    slot: int
    cost: float
    dropped: bool
    delay_slots: int
    where: str  # "local", "transmission" or "edge"


class MECEnvironment:
    def __init__(self, cfg: RunConfig, trace: bool = False):
        self.cfg = cfg
        self.M, self.N, self.T = cfg.M, cfg.N, cfg.T
        self.trace_enabled = trace
        self.trace: List[Tuple[int, int, str, int, float]] = []
        self._ids = itertools.count(1)
        self.timelines = [DeviceTimeline(cfg.device_cycles_per_slot,
                                         {n: cfg.tran_bits_per_slot for n in range(self.N)})
                          for _ in range(self.M)]
        self.edges = [edgecore.EdgeQueueState(self.M, cfg.edge_cycles_per_slot) for _ in range(self.N)]
        self.history = edgecore.LoadHistory(cfg.t_step, self.N, self.M)
        self.seed: Optional[int] = None
        self.episode = 0
        self.t = 1
        self._arrival_procs: List[ArrivalProcess] = []
        self._reset_state()

    # episode control ------------------------------------------------------------------
    def _reset_state(self) -> None:
        for tl in self.timelines:
            tl.clear()
        for e in self.edges:
            e.reset()
        self.history.reset()
        self.t = 1
        self.current: List[Optional[Task]] = [None] * self.M
        self.decided: List[bool] = [False] * self.M
        self.tasks: Dict[int, Task] = {}
        self.decisions: Dict[int, ActionChoice] = {}
        self._local_due: Dict[int, List[Tuple[Task, bool]]] = {}
        self._tran_due: Dict[int, List[Tuple[Task, int, bool]]] = {}
        self._deliveries: Dict[int, List[Tuple[Task, int]]] = {}
        self.load_counts: List[np.ndarray] = []
        self.n_arrivals = 0
        self.n_completed = 0
        self.n_dropped = 0
        self.trace.clear()

    def reset(self, seed: int, episode: int = 0) -> None:
        """Empty every queue and reseed arrival streams from ``(seed, episode)``."""
        self.seed, self.episode = int(seed), int(episode)
        self._reset_state()
        cfg = self.cfg
        self._arrival_procs = [
            ArrivalProcess(cfg.arrival_probability, cfg.sizes_bits, substream(seed, ARRIVALS, episode, m),
                           cfg.density_cycles_per_bit, cfg.deadline_slots, self._ids)
            for m in range(self.M)]
        self._draw_arrivals()

    def _draw_arrivals(self) -> None:
        for m in range(self.M):
            task = draw_arrival(self._arrival_procs[m], m, self.t) if self.t <= self.T else None
            self.current[m] = task
            self.decided[m] = False
            if task is not None:
                self.n_arrivals += 1
                self.tasks[task.id] = task
                self._log(m, "arrival", task.id, 0.0)

    @property
    def done(self) -> bool:
        return self.t > self.T

    def _log(self, m: int, kind: str, task_id: int, cost: float) -> None:
        if self.trace_enabled:
            self.trace.append((self.t, m, kind, task_id, cost))

    # per-device interface -------------------------------------------------------------
    def arrival(self, m: int) -> Optional[Task]:
        return self.current[m]

    def observe(self, m: int, t: Optional[int] = None) -> Observation:
        if t is not None and t != self.t:
            raise ValueError(f"environment is at slot {self.t}, cannot observe slot {t}")
        task = self.current[m]
        return Observation(
            task_size_bits=task.size_bits if task is not None else 0.0,
            comp_wait_slots=comp_wait(self.timelines[m], self.t),
            tran_wait_slots=tran_wait(self.timelines[m], self.t),
            edge_queue_bits=np.array([e.queue_bits[m] for e in self.edges]),
            load_history=self.history.matrix(),
        )

    def apply_action(self, m: int, a: ActionChoice, t: Optional[int] = None) -> None:
        if t is not None and t != self.t:
            raise ValueError(f"environment is at slot {self.t}, cannot act in slot {t}")
        task = self.current[m]
        if task is None:
            raise ValueError(f"device {m} has no task arrival in slot {self.t}")
        if self.decided[m]:
            raise ValueError(f"device {m} already decided on its task in slot {self.t}")
        if not isinstance(a, ActionChoice):
            raise TypeError("action must be an ActionChoice")
        tl = self.timelines[m]
        if a.local:
            finish, ok = comp_outcome(task, comp_wait(tl, self.t), tl)
            tl.record_comp(self.t, finish)
            self._local_due.setdefault(finish, []).append((task, ok))
            self._log(m, "local", task.id, 0.0)
        else:
            if not 0 <= a.edge_choice < self.N:
                raise ValueError(f"edge index {a.edge_choice} outside 0..{self.N - 1}")
            finish, sent = tran_outcome(task, tran_wait(tl, self.t), a.edge_choice, tl)
            tl.record_tran(self.t, finish)
            self._tran_due.setdefault(finish, []).append((task, a.edge_choice, sent))
            self._log(m, f"offload_edge{a.edge_choice}", task.id, 0.0)
        self.decided[m] = True
        self.decisions[task.id] = a

    # global step -------------------------------------------------------------------------
    def _event(self, task: Task, dropped: bool, where: str) -> CostEvent:
        t = self.t
        if dropped:
            assert t == task.deadline_slot
            self.n_dropped += 1
            delay, cost = task.deadline_slots, self.cfg.penalty
        else:
            self.n_completed += 1
            delay = t - task.birth_slot + 1
            assert 1 <= delay <= task.deadline_slots
            cost = float(delay)
        self._log(task.device, "drop" if dropped else "complete", task.id, cost)
        return CostEvent(task.device, task.id, task.birth_slot, t, cost, dropped, delay, where)

    def step_world(self, t: Optional[int] = None) -> Dict[int, List[CostEvent]]:
        if self.done:
            raise RuntimeError("episode is over; call reset()")
        if t is not None and t != self.t:
            raise ValueError(f"environment is at slot {self.t}, cannot step slot {t}")
        for m in range(self.M):
            if self.current[m] is not None and not self.decided[m]:
                raise RuntimeError(f"device {m} has an undecided task in slot {self.t}")
        t = self.t
        events: Dict[int, List[CostEvent]] = {m: [] for m in range(self.M)}

        for task, n in self._deliveries.pop(t, []):
            edgecore.deliver(self.edges[n], task, t)
            self._log(task.device, f"deliver_edge{n}", task.id, 0.0)

        for task, ok in self._local_due.pop(t, []):
            events[task.device].append(self._event(task, not ok, "local"))
        for task, n, sent in self._tran_due.pop(t, []):
            if sent:
                self._deliveries.setdefault(t + 1, []).append((task, n))
            else:
                events[task.device].append(self._event(task, True, "transmission"))

        counts = np.zeros(self.N)
        for n, state in enumerate(self.edges):
            results = edgecore.step_edge(state, t)
            counts[n] = len(results)
            for m, res in results.items():
                for task in res.completed:
                    events[m].append(self._event(task, False, "edge"))
                for task in res.dropped:
                    events[m].append(self._event(task, True, "edge"))
        edgecore.record_load(self.history, counts)
        self.load_counts.append(counts)

        for m in events:
            events[m].sort(key=lambda e: e.birth_slot)
        self.t += 1
        self._draw_arrivals()
        return events

    # accounting --------------------------------------------------------------------------
    def in_flight(self) -> int:
        """Tasks that arrived but have been neither processed nor dropped."""
        local = sum(len(v) for v in self._local_due.values())
        tran = sum(len(v) for v in self._tran_due.values())
        deliv = sum(len(v) for v in self._deliveries.values())
        at_edges = sum(len(q) for e in self.edges for q in e.inflight)
        undecided = sum(1 for m in range(self.M) if self.current[m] is not None and not self.decided[m])
        return local + tran + deliv + at_edges + undecided

    def check_accounting(self) -> None:
        inflight = self.in_flight()
        if self.n_arrivals != self.n_completed + self.n_dropped + inflight:
            raise AssertionError(
                f"task accounting broken: arrivals={self.n_arrivals} completed={self.n_completed} "
                f"dropped={self.n_dropped} in_flight={inflight}")
        for e in self.edges:
            e.check_consistency()

    def write_trace(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "device", "event", "task_id", "cost"])
            for slot, m, kind, tid, cost in self.trace:
                w.writerow([slot, m, kind, tid, f"{cost:.6f}"])
