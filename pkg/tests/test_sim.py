import json
from dataclasses import replace

import numpy as np
import pytest

from dqm import sim
from dqm.classify import accuracy
from dqm.dataset import EncodedRecord
from dqm.sim import (
    EVENT_KINDS,
    LinkSpec,
    SimConfig,
    SimError,
    build_topology,
    collect_metrics,
    make_streams,
    run,
    trace_invariant_errors,
    transmission_delay,
    write_trace,
)


class Constant:
    kind = "const"

    def __init__(self, label):
        self.label = label

    def predict(self, X):
        return np.full(len(X), self.label)


@pytest.fixture(scope="module")
def small_run(lda_small, encoded_small, schema_small):
    cfg = SimConfig(n_devices=50, seed=3)
    streams = make_streams(cfg, encoded_small)
    return cfg, streams, run(cfg, lda_small, streams, schema_small)


# --- topology and delay ------------------------------------------------------------


def test_topology_node_count():
    topo = build_topology(SimConfig(n_devices=50))
    assert len(topo.nodes) == 54
    roles = [n.role for n in topo.nodes]
    assert roles.count("cloud") == 1 and roles.count("broker") == 1 and roles.count("edge_worker") == 2


def test_topology_even_split_and_specs():
    topo = build_topology(SimConfig(n_devices=400))
    per_worker = np.bincount(list(topo.device_worker.values()))
    assert sorted(per_worker[per_worker > 0]) == [200, 200]
    cloud = topo.nodes[topo.cloud_id]
    assert (cloud.ram_mb, cloud.cpu_ghz) == (10240, 16.0)
    dev = topo.nodes[topo.device_node[0]]
    assert (dev.ram_mb, dev.cpu_ghz) == (500, 1.0)


def test_topology_bandwidths_seeded_and_bounded():
    a = build_topology(SimConfig(n_devices=30, seed=9))
    b = build_topology(SimConfig(n_devices=30, seed=9))
    c = build_topology(SimConfig(n_devices=30, seed=10))
    bw = lambda t: [l.bandwidth_mbits for _, l in sorted(t.links.items())]
    assert bw(a) == bw(b) != bw(c)
    assert all(3.0 <= x <= 10.0 for x in bw(a))


def test_config_rejects_zero_devices():
    with pytest.raises(SimError):
        SimConfig(n_devices=0)


def test_transmission_delay():
    assert transmission_delay(200, LinkSpec(0, 1, 10.0, 0.0)) == pytest.approx(1.6e-4, rel=1e-12)
    assert transmission_delay(200, LinkSpec(0, 1, 3.0, 0.0)) == pytest.approx(5.3333e-4, rel=1e-4)
    assert transmission_delay(200, LinkSpec(0, 1, 20.0, 0.0)) == pytest.approx(0.8e-4, rel=1e-12)


# --- runs ---------------------------------------------------------------------------


def test_clean_world(encoded_small):
    cfg = SimConfig(n_devices=40, attacker_ratio=0.0, seed=1)
    report, trace, _ = run(cfg, Constant(0), make_streams(cfg, encoded_small))
    assert report.devices_quarantined == 0
    assert report.quarantine_accuracy == 1.0
    assert report.packets_delivered == report.packets_emitted


def test_all_attackers_always_flagged(encoded_small):
    cfg = SimConfig(n_devices=40, attacker_ratio=1.0, seed=1)
    report, trace, _ = run(cfg, Constant(1), make_streams(cfg, encoded_small))
    assert report.devices_quarantined == 40
    assert report.quarantine_accuracy == 1.0
    assert report.packets_delivered_direct == 0


def test_report_invariants(small_run):
    cfg, streams, (report, trace, episodes) = small_run
    assert report.conservation_errors() == []
    assert report.quarantine_accuracy == accuracy(report.quarantine_confusion)
    assert report.devices_quarantined <= cfg.n_devices
    # 12 records at 3 s spacing all fit inside 120 s
    assert report.packets_emitted == sum(len(s.records) for s in streams)
    assert sum(report.episode_outcomes.values()) == len(episodes)


def test_report_equals_trace_recount(small_run):
    _, _, (report, trace, _) = small_run
    assert collect_metrics(trace, report.model) == report


def test_trace_schema_and_causality(small_run):
    _, _, (_, trace, _) = small_run
    assert all(set(ev) == {"t", "kind", "device", "worker", "record_idx", "decision", "truth"} for ev in trace)
    assert {ev["kind"] for ev in trace} <= set(EVENT_KINDS)
    ts = [ev["t"] for ev in trace]
    assert ts == sorted(ts)
    assert trace_invariant_errors(trace) == []


def test_firewall_check_catches_forged_delivery(small_run):
    _, _, (_, trace, _) = small_run
    bl = next(ev for ev in trace if ev["kind"] == "quarantine_resolve" and ev["decision"] == "blacklist")
    t_end = trace[-1]["t"] + 1.0
    forged = list(trace) + [
        {**bl, "t": t_end, "kind": "emit", "record_idx": 999999, "decision": None},
        {**bl, "t": t_end, "kind": "deliver_analytics", "record_idx": 999999, "decision": "direct"},
    ]
    assert any("blacklisting" in e for e in trace_invariant_errors(forged))


def test_blacklisted_devices_never_deliver_later(small_run):
    _, _, (_, trace, _) = small_run
    first_bl = {}
    for ev in trace:
        if ev["kind"] == "quarantine_resolve" and ev["decision"] == "blacklist":
            first_bl.setdefault(ev["device"], ev["t"])
    assert first_bl, "scenario should blacklist someone"
    for ev in trace:
        if ev["kind"] == "emit" and ev["device"] in first_bl and ev["t"] > first_bl[ev["device"]]:
            later = [e for e in trace if e["device"] == ev["device"] and e["record_idx"] == ev["record_idx"]]
            assert not any(e["kind"] == "deliver_analytics" for e in later)


def test_replay_is_byte_identical(tmp_path, lda_small, encoded_small, schema_small):
    cfg = SimConfig(n_devices=30, seed=7)
    paths = []
    for i in range(2):
        _, trace, _ = run(cfg, lda_small, make_streams(cfg, encoded_small), schema_small)
        paths.append(write_trace(trace, tmp_path / f"t{i}.ndjson"))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    _, other, _ = run(replace(cfg, seed=8), lda_small, make_streams(replace(cfg, seed=8), encoded_small),
                      schema_small)
    assert write_trace(other, tmp_path / "o.ndjson").read_bytes() != paths[0].read_bytes()


def test_stream_count_mismatch(lda_small, encoded_small):
    cfg = SimConfig(n_devices=10)
    streams = make_streams(replace(cfg, n_devices=9), encoded_small)
    with pytest.raises(SimError):
        run(cfg, lda_small, streams)


# --- metrics from traces -----------------------------------------------------------------


def test_collect_metrics_empty_trace():
    r = collect_metrics([])
    assert r.packets_emitted == 0 and r.devices_quarantined == 0
    assert r.quarantine_accuracy is None


def test_collect_metrics_hand_trace():
    trace = []
    for k in range(10):
        trace.append({"t": k, "kind": "emit", "device": 0, "worker": 2, "record_idx": k, "decision": None,
                      "truth": True})
    for k in range(6):
        trace.append({"t": 20 + k, "kind": "deliver_analytics", "device": 0, "worker": 2, "record_idx": k,
                      "decision": "direct", "truth": True})
    for k in range(6, 10):
        trace.append({"t": 30 + k, "kind": "quarantine_arrival", "device": 0, "worker": 2, "record_idx": k,
                      "decision": "admit" if k == 6 else "buffer", "truth": True})
    r = collect_metrics(trace)
    assert r.packets_delivered + r.packets_quarantined == 10
    assert r.devices_quarantined == 1 and r.quarantine_accuracy == 1.0


def test_collect_metrics_malformed():
    with pytest.raises(SimError):
        collect_metrics([{"t": 0, "kind": "teleport", "device": 0, "decision": None}])
    with pytest.raises(SimError):
        collect_metrics([{"t": 0}])


def test_trace_file_round_trip(tmp_path, small_run):
    _, _, (report, trace, _) = small_run
    p = write_trace(trace, tmp_path / "t.ndjson")
    assert sim.read_trace(p) == json.loads(json.dumps(trace))
    (tmp_path / "bad.ndjson").write_text("{not json\n")
    with pytest.raises(SimError):
        sim.read_trace(tmp_path / "bad.ndjson")


# --- sweep -------------------------------------------------------------------------------


def test_sweep_is_deterministic(lda_small, encoded_small, schema_small):
    cfg = SimConfig(seed=2)
    a = sim.sweep(cfg, {"lda": lda_small}, encoded_small, (50, 100), schema_small)
    b = sim.sweep(cfg, {"lda": lda_small}, encoded_small, (50, 100), schema_small)
    assert [r.n_devices for r in a] == [50, 100]
    assert a == b


def test_derive_seed():
    assert sim.derive_seed(0, "a") == sim.derive_seed(0, "a")
    assert sim.derive_seed(0, "a") != sim.derive_seed(0, "b") != sim.derive_seed(1, "a")
    assert 0 <= sim.derive_seed(123, "x", 4) < 2**63


def test_config_round_trip():
    cfg = SimConfig(n_devices=77, attacker_mix=(0.7, 0.9))
    assert SimConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(SimError):
        SimConfig.from_dict({"n_devise": 3})


def test_every_record_traverses_the_pipeline(encoded_small):
    # destination falls back to 0 without a schema; every record still traverses the pipeline
    cfg = SimConfig(n_devices=5, seed=0)
    streams = make_streams(cfg, encoded_small)
    report, trace, _ = run(cfg, Constant(0), streams)
    kinds = [ev["kind"] for ev in trace]
    assert kinds.count("emit") == kinds.count("classify") == kinds.count("route") == report.packets_emitted
    assert isinstance(streams[0].records[0], EncodedRecord)
