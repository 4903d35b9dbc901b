import csv

import numpy as np
import pytest

from mecoffload.cli import main, parse_seeds
from mecoffload.config import ConfigError, RunConfig, dump_config, load_config, substream
from mecoffload.env import ActionChoice, Observation
from mecoffload.harness import (
    CSV_COLUMNS, Experiment, MetricsRow, ServiceRates, emit_csv, evaluate_baseline, myopic_estimates,
    policy_myopic_estimate, policy_no_offload, policy_random, read_csv, run_experiment, sweep,
)

from conftest import small_config


def obs(size=3e6, dc=0, dt=0, n_edges=2, load=None):
    h = np.zeros((3, n_edges)) if load is None else np.asarray(load, dtype=float)
    return Observation(size, dc, dt, np.zeros(n_edges), h)


# policies ----------------------------------------------------------------------------------------

def test_no_offload_always_local():
    assert policy_no_offload(obs()) == ActionChoice(True)


def test_random_uniform_over_six_actions():
    rng = np.random.default_rng(0)
    n = 100_000
    counts = np.bincount([policy_random(obs(n_edges=5), rng).index for _ in range(n)], minlength=6)
    sigma = np.sqrt(n * (1 / 6) * (5 / 6))
    assert np.all(np.abs(counts - n / 6) < 3 * sigma)


def test_random_without_edges_is_local():
    rng = np.random.default_rng(0)
    assert all(policy_random(obs(n_edges=0), rng).local for _ in range(20))


def test_myopic_prefers_fast_edge_when_idle():
    rates = ServiceRates(local_bits=0.84e6, tran_bits=1.4e6, edge_bits=14e6)
    est = myopic_estimates(obs(size=1e6), rates)
    assert est.tolist() == [2.0, 2.0, 2.0]
    assert policy_myopic_estimate(obs(size=1e6), rates).local  # tie goes to local
    a = policy_myopic_estimate(obs(size=1e6, dc=3), rates)
    assert a == ActionChoice(False, 0)


def test_myopic_avoids_backed_up_link():
    rates = ServiceRates(local_bits=0.84e6, tran_bits=1.4e6, edge_bits=14e6)
    assert policy_myopic_estimate(obs(size=3e6, dc=2, dt=10), rates).local


def test_myopic_uses_newest_load_row():
    rates = ServiceRates(local_bits=0.1e6, tran_bits=10e6, edge_bits=1e6)
    load = [[0, 10], [0, 10], [10, 0]]  # edge 0 busy now, edge 1 busy earlier
    assert policy_myopic_estimate(obs(size=2e6, load=load), rates) == ActionChoice(False, 1)


# metrics rows and CSV ---------------------------------------------------------------------------------

def test_metrics_row_values():
    r = MetricsRow.from_counts(3, 10, 6, 3, 1, delay_slots_sum=18, cost_sum=78.0, delta_s=0.1)
    assert (r.drop_ratio, r.avg_delay_s, r.mean_cost) == (0.3, pytest.approx(0.3), pytest.approx(78 / 9))
    with pytest.raises(AssertionError):
        MetricsRow.from_counts(1, 10, 6, 3, 0, 0, 0, 0.1)
    empty = MetricsRow.from_counts(1, 0, 0, 0, 0, 0, 0, 0.1)
    assert empty.drop_ratio == 0.0 and empty.avg_delay_s == 0.0


def test_csv_header_only(tmp_path):
    p = tmp_path / "m.csv"
    emit_csv([], p)
    assert p.read_text() == ",".join(CSV_COLUMNS) + "\n"


def test_csv_round_trip(tmp_path):
    rows = [MetricsRow(1, 30, 20, 9, 1, 0.3, 0.423333, 7.1), MetricsRow(2, 0, 0, 0, 0, 0.0, 0.0, 0.0)]
    p = tmp_path / "m.csv"
    emit_csv(rows, p)
    assert read_csv(p) == rows
    assert "0.423333" in p.read_text()


def test_csv_refuses_overwrite(tmp_path):
    p = tmp_path / "m.csv"
    emit_csv([], p)
    with pytest.raises(FileExistsError):
        emit_csv([], p)
    emit_csv([MetricsRow(1, 1, 1, 0, 0, 0.0, 0.1, 1.0)], p, overwrite=True)
    assert len(read_csv(p)) == 1


def test_csv_io_error_names_path(tmp_path):
    bad = tmp_path / "missing" / "m.csv"
    with pytest.raises(OSError, match="missing"):
        emit_csv([], bad)


# experiments -------------------------------------------------------------------------------------------

def test_no_arrivals():
    rows = list(Experiment(small_config(arrival_probability=0.0, policy="no_offload", episodes=3)).train())
    assert all(r.arrivals == 0 and r.drop_ratio == 0.0 for r in rows)


def test_no_offload_queue_recursion():
    """2.0 Mbit every slot, 3 slots of local service, deadline 10 slots."""
    cfg = small_config(M=1, N=1, T=40, arrival_probability=1.0, sizes_mbits=[2.0], deadline_slots=10,
                       policy="no_offload", episodes=1)
    events = []
    Experiment(cfg).run_episode(1, on_slot=lambda t, evs: events.extend(evs[0]))
    got = {e.birth_slot: (e.slot, e.dropped) for e in events}
    # oracle: l_k = min(k + delta_k + 3 - 1, k + 9), delta_k = max(l_{k-1} - k + 1, 0)
    prev, expected, waits = 0, {}, []
    for k in range(1, 41):
        delta = max(prev - k + 1, 0)
        raw = k + delta + 2
        l = min(raw, k + 9)
        waits.append(delta)
        expected[k] = (l, raw > k + 9)
        prev = l
    assert {k: v for k, v in expected.items() if v[0] <= 40} == got
    assert waits[:5] == [0, 2, 4, 6, 8]
    first_drop = min(k for k, (_, d) in expected.items() if d)
    assert first_drop == 5
    assert all(expected[k][1] for k in range(first_drop, 41))


@pytest.mark.parametrize("policy", ["no_offload", "random", "myopic"])
def test_baseline_csv_deterministic(tmp_path, policy):
    cfg = small_config(policy=policy, episodes=3, T=30)
    run_experiment(cfg, tmp_path / "a.csv")
    run_experiment(cfg, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_adding_learner_does_not_perturb_arrivals():
    base = small_config(policy="no_offload", episodes=2, T=20)
    mixed = base.replace(device_policies=["drl", "no_offload", "no_offload"], batch_size=4,
                         lstm_hidden=4, fc1=8, fc2=8, head=4)
    a = list(Experiment(base).train())
    b = list(Experiment(mixed.validate()).train())
    assert [r.arrivals for r in a] == [r.arrivals for r in b]


def test_drl_run_trains_and_evaluates(tmp_path):
    cfg = small_config(policy="drl", episodes=3, T=20, batch_size=4, lstm_hidden=4, fc1=8, fc2=8, head=4,
                       eval_episodes=2)
    res = run_experiment(cfg, tmp_path / "m.csv", eval_csv_path=tmp_path / "e.csv",
                         checkpoint_dir=tmp_path / "ck", trace_path=tmp_path / "t.csv")
    assert len(res.rows) == 3 and len(res.eval_rows) == 2
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["device0.ckpt", "device1.ckpt", "device2.ckpt"]
    assert [r.episode for r in read_csv(tmp_path / "e.csv")] == [1_000_001, 1_000_002]
    assert (tmp_path / "t.csv").exists()
    assert 0.0 <= res.eval_drop_ratio <= 1.0


def test_accounting_holds_for_all_policies():
    for policy in ("no_offload", "random", "myopic", "drl"):
        cfg = small_config(policy=policy, episodes=2, T=25, arrival_probability=0.7, batch_size=4,
                           lstm_hidden=4, fc1=8, fc2=8, head=4)
        for r in Experiment(cfg).train():
            assert r.arrivals == r.completed + r.dropped + r.in_flight_at_end


def test_fast_system_random_offload_takes_two_slots():
    cfg = small_config(M=3, N=2, T=60, f_tran_mbps=1e4, f_edge_ghz=1e4, arrival_probability=0.3, episodes=1)
    edge_delays = []
    Experiment(cfg).run_episode(1, on_slot=lambda t, evs: edge_delays.extend(
        e.delay_slots for v in evs.values() for e in v if e.where == "edge"))
    assert edge_delays and set(edge_delays) == {2}


def test_evaluate_baseline_uses_held_out_episodes():
    rows = evaluate_baseline(small_config(episodes=1, T=10), "myopic", 3)
    assert [r.episode for r in rows] == [1_000_001, 1_000_002, 1_000_003]


def test_sweep_rows():
    rows = sweep(small_config(episodes=2, T=20), "arrival_probability", ["0.1", "0.9"], [0, 1], ["no_offload"])
    assert [r.value for r in rows] == [0.1, 0.9]
    assert rows[0].drop_ratio <= rows[1].drop_ratio
    assert all(r.seeds == 2 for r in rows)


# configuration -----------------------------------------------------------------------------------------

def test_defaults_match_reference_settings():
    cfg = RunConfig()
    assert (cfg.M, cfg.N, cfg.T, cfg.deadline_slots, cfg.t_step) == (50, 5, 100, 10, 10)
    assert cfg.penalty == 20.0 and cfg.gamma == 0.9
    assert cfg.edge_cycles_per_slot == pytest.approx(4.18e9)
    assert cfg.sizes_mbits[0] == 2.0 and cfg.sizes_mbits[-1] == 5.0 and len(cfg.sizes_mbits) == 31


def test_validation_reports_fields():
    with pytest.raises(ConfigError) as info:
        RunConfig(M=0, arrival_probability=2.0, policy="greedy").validate()
    assert {"M", "arrival_probability", "policy"} <= set(info.value.errors)


def test_network_fields_validated_and_coerced(tmp_path):
    with pytest.raises(ConfigError) as info:
        RunConfig(head=0, max_grad_norm=-1.0).validate()
    assert {"head", "max_grad_norm"} <= set(info.value.errors)
    cfg = load_config(None, {"head": "16", "max_grad_norm": "5"})
    assert (cfg.head, cfg.max_grad_norm) == (16, 5.0)
    assert RunConfig().max_grad_norm is None


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("M: 4\nN: 1\narrival_probability: 0.5\nsizes_mbits: [2.0, 3.0]\n")
    cfg = load_config(p, {"N": "2", "seed": "9"})
    assert (cfg.M, cfg.N, cfg.seed, cfg.arrival_probability, cfg.sizes_mbits) == (4, 2, 9, 0.5, [2.0, 3.0])
    with pytest.raises(ConfigError):
        load_config(p, {"bogus": "1"})
    with pytest.raises(ConfigError):
        load_config(p, {"M": "2.5"})
    out = tmp_path / "d.yaml"
    dump_config(cfg, out)
    assert load_config(out) == cfg


def test_substreams_independent():
    a = substream(1, 0, 1, 0).random(5)
    assert np.array_equal(a, substream(1, 0, 1, 0).random(5))
    assert not np.array_equal(a, substream(1, 1, 1, 0).random(5))
    assert not np.array_equal(a, substream(1, 0, 2, 0).random(5))
    assert not np.array_equal(a, substream(1, 0, 1, 1).random(5))


# command line -------------------------------------------------------------------------------------------------

def test_parse_seeds():
    assert parse_seeds("3") == [0, 1, 2]
    assert parse_seeds("2-4") == [2, 3, 4]
    assert parse_seeds("5,1") == [5, 1]


def test_cli_run_deterministic(tmp_path, capsys):
    args = ["run", "--M", "3", "--N", "2", "--T", "20", "--episodes", "2", "--policy", "random", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 1  # no silent overwrite
    assert main(args + ["--out", str(tmp_path / "a.csv"), "--overwrite"]) == 0


def test_cli_config_errors(tmp_path, capsys):
    assert main(["run", "--M", "0", "--out", str(tmp_path / "x.csv")]) == 2
    assert "M" in capsys.readouterr().err


def test_cli_sweep(tmp_path):
    out = tmp_path / "s.csv"
    rc = main(["sweep", "--M", "3", "--N", "1", "--T", "15", "--episodes", "1", "--axis", "deadline_slots",
               "--values", "4,12", "--seeds", "2", "--policies", "no_offload,random", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 4 and rows[0]["axis"] == "deadline_slots"


def test_cli_check(capsys):
    assert main(["check", "--instances", "20"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 4
