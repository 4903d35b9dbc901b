import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecoffload.edge import EdgeQueueState, LoadHistory, active_set, deliver, record_load, step_edge
from mecoffload.oracle import edge_finish_from_prefix_sums
from mecoffload.simcore import Task, cycles_per_slot

RHO = 297.0
F_EDGE = cycles_per_slot(41.8, 0.1)


def task(tid, device, size_mbits, birth=1, tau=10):
    return Task(tid, device, birth, size_mbits * 1e6, RHO, tau)


def test_deliver_to_empty_queue():
    st_ = EdgeQueueState(3, F_EDGE)
    deliver(st_, task(1, 0, 3.0), 2)
    assert st_.queue_bits[0] == pytest.approx(3e6)
    st_.check_consistency()


def test_two_deliveries_both_active():
    st_ = EdgeQueueState(3, F_EDGE)
    deliver(st_, task(1, 0, 3.0), 2)
    deliver(st_, task(2, 1, 3.0), 2)
    assert active_set(st_, st_.arrival_bits, 2) == {0, 1}


def test_no_delivery_stays_inactive():
    st_ = EdgeQueueState(3, F_EDGE)
    assert active_set(st_, np.zeros(3), 1) == set()
    assert step_edge(st_, 1) == {}


def test_active_set_disjuncts():
    st_ = EdgeQueueState(2, F_EDGE)
    deliver(st_, task(1, 0, 3.0), 1)
    assert active_set(st_, st_.arrival_bits, 1) == {0}  # arrival into an empty queue
    st_.queue_bits[1] = 1e6  # carried-over backlog, no arrival
    assert 1 in active_set(st_, np.array([3e6, 0.0]), 1)


def test_delivery_errors():
    st_ = EdgeQueueState(2, F_EDGE)
    deliver(st_, task(1, 0, 3.0), 1)
    with pytest.raises(ValueError):
        deliver(st_, task(1, 1, 3.0), 1)
    with pytest.raises(ValueError):
        deliver(st_, task(2, 0, 3.0), 1)


def test_equal_share_two_devices():
    st_ = EdgeQueueState(2, F_EDGE)
    deliver(st_, task(1, 0, 20.0, tau=100), 1)
    deliver(st_, task(2, 1, 20.0, tau=100), 1)
    res = step_edge(st_, 1)
    share = 4.18e9 / (297.0 * 2)
    assert share / 1e6 == pytest.approx(7.037, abs=1e-3)
    for m in (0, 1):
        assert res[m].allocated_bits == pytest.approx(share)
        assert st_.queue_bits[m] == pytest.approx(20e6 - share)


def test_single_device_small_task_finishes_on_arrival_slot():
    st_ = EdgeQueueState(1, F_EDGE)
    deliver(st_, task(1, 0, 2.0), 5)
    res = step_edge(st_, 5)
    assert [t.id for t in res[0].completed] == [1]
    assert st_.finish_slots[1] == 5
    assert st_.queue_bits[0] == 0


def test_deadline_drop_removes_remaining_bits():
    st_ = EdgeQueueState(2, 1e8)  # 336700 bits per slot for one queue
    deliver(st_, task(1, 0, 3.0, birth=1, tau=3), 2)
    step_edge(st_, 2)
    before = st_.queue_bits[0]
    res = step_edge(st_, 3)
    assert [t.id for t in res[0].dropped] == [1]
    assert res[0].dropped_bits == pytest.approx(before - res[0].processed_bits)
    assert st_.queue_bits[0] == 0
    st_.check_consistency()


def test_next_task_starts_in_next_slot():
    st_ = EdgeQueueState(1, F_EDGE)
    deliver(st_, task(1, 0, 2.0, birth=1), 3)
    step_edge(st_, 3)
    deliver(st_, task(2, 0, 2.0, birth=2), 3 + 1)
    step_edge(st_, 4)
    assert st_.start_slots == {1: 3, 2: 4}


def test_load_history_ring():
    h = LoadHistory(3, 2, 5)
    assert h.matrix().shape == (3, 2) and not h.matrix().any()
    record_load(h, [3, 0])
    assert h.matrix()[-1].tolist() == [3, 0]
    assert h.matrix()[:-1].sum() == 0
    for row in ([1, 1], [2, 2], [4, 5]):
        record_load(h, row)
    assert h.matrix().tolist() == [[1, 1], [2, 2], [4, 5]]
    assert h.latest().tolist() == [4, 5]


def test_load_counts_bounded():
    h = LoadHistory(3, 2, 5)
    with pytest.raises(ValueError):
        record_load(h, [6, 0])
    with pytest.raises(ValueError):
        record_load(h, [-1, 0])
    with pytest.raises(ValueError):
        record_load(h, [1])
    record_load(h, {1: 2})
    assert h.latest().tolist() == [0, 2]


@settings(max_examples=80, deadline=None)
@given(n_dev=st.integers(1, 4), cap=st.floats(5e7, 2e9), seed=st.integers(0, 10_000))
def test_edge_service_properties(n_dev, cap, seed):
    """Equal shares, start-slot law, and prefix-sum finish slots on random delivery patterns."""
    rng = np.random.default_rng(seed)
    state = EdgeQueueState(n_dev, cap)
    ids = itertools.count(1)
    delivered = {m: [] for m in range(n_dev)}
    tau = rng.integers(2, 10, n_dev)
    counts = []
    T = 30
    for t in range(1, T + 1):
        for m in range(n_dev):
            if t <= 20 and rng.random() < 0.4:
                # a device's tasks share one deadline and arrive in birth order before expiring
                tk = Task(next(ids), m, max(1, t - 1), float(rng.uniform(0.5, 5)) * 1e6, RHO, tau[m])
                deliver(state, tk, t)
                delivered[m].append((tk, t))
        res = step_edge(state, t)
        counts.append(len(res))
        for r in res.values():
            assert r.allocated_bits == pytest.approx(cap / (RHO * len(res)))
            assert r.processed_bits <= r.allocated_bits + 1e-6
        state.check_consistency()
    for m in range(n_dev):
        q = [(tk.id, tk.size_bits, arr, tk.deadline_slot) for tk, arr in delivered[m]]
        expected = edge_finish_from_prefix_sums(q, counts, cap, RHO, T)
        prev = 0
        for tk, arr in delivered[m]:
            assert state.finish_slots.get(tk.id) == expected[tk.id]
            if tk.id in state.start_slots:
                assert state.start_slots[tk.id] == max(arr, prev + 1)
            prev = state.finish_slots.get(tk.id, T)
