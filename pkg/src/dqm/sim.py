"""Discrete-event simulation of devices -> edge workers -> IoT broker -> quarantine/analytics.

Every device emits one record per ``emission_interval_s`` starting from a
seeded phase offset. The record travels to the device's worker, gets
classified, travels on to the broker, and the broker either forwards it to
analytics, buffers it in quarantine, or drops it (blacklisted device).

The loop is single-threaded and ordered by ``(time, sequence)``, so a run is
a pure function of its inputs. Each processed event is appended to a trace;
:func:`collect_metrics` rebuilds the report from that trace alone.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .classify import ConfusionMatrix, accuracy
from .dataset import DeviceStream, EncodedRecord, EncodingSchema, partition_streams
from .quarantine import QuarantineConfig, QuarantineStore, Resolution

EVENT_KINDS = (
    "emit", "arrive_worker", "classify", "route",
    "quarantine_arrival", "quarantine_resolve", "deliver_analytics",
)


class SimError(RuntimeError):
    pass


def derive_seed(base: int, *labels) -> int:
    """Stable named sub-seed; independent of Python's hash randomisation."""
    key = ":".join([str(int(base)), *map(str, labels)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class NodeSpec:
    node_id: int
    role: str
    ram_mb: int
    cpu_ghz: float
    packets_per_instruction: float | None = None  # carried as metadata only


@dataclass(frozen=True)
class LinkSpec:
    src: int
    dst: int
    bandwidth_mbits: float
    latency_s: float = 0.0


@dataclass(frozen=True)
class SimConfig:
    n_devices: int = 400
    attacker_ratio: float = 0.39
    packet_size_bytes: int = 200
    emission_interval_s: float = 3.0
    duration_s: float = 120.0
    seed: int = 0
    n_workers: int = 2
    bandwidth_mbits: tuple[float, float] = (3.0, 10.0)
    latency_s: float = 0.001
    worker_service_time_s: float = 0.0
    cloud_ram_mb: int = 10240
    cloud_cpu_ghz: float = 16.0
    edge_ram_mb: int = 2048
    edge_cpu_ghz: float = 3.0
    device_ram_mb: int = 500
    device_cpu_ghz: float = 1.0
    packets_per_instruction: float = 100e8
    # stream construction
    records_per_device: int = 12
    attacker_mix: tuple[float, float] = (0.6, 1.0)
    normal_mix: tuple[float, float] = (0.0, 0.06)
    attacker_threshold: float = 0.5
    quarantine: QuarantineConfig = field(default_factory=QuarantineConfig)

    def __post_init__(self):
        if self.n_devices < 1:
            raise SimError("n_devices must be >= 1")
        if self.packet_size_bytes <= 0:
            raise SimError("packet_size_bytes must be positive")
        if self.duration_s <= 0 or self.emission_interval_s <= 0:
            raise SimError("duration_s and emission_interval_s must be positive")
        if self.n_workers < 1:
            raise SimError("at least one edge worker is required")
        lo, hi = self.bandwidth_mbits
        if not 0 < lo <= hi:
            raise SimError("invalid bandwidth range")

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SimError(f"unknown sim config keys: {sorted(unknown)}")
        if "quarantine" in d and isinstance(d["quarantine"], dict):
            d["quarantine"] = QuarantineConfig(**d["quarantine"])
        for key in ("bandwidth_mbits", "attacker_mix", "normal_mix"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Topology:
    nodes: list[NodeSpec]
    links: dict[tuple[int, int], LinkSpec]
    device_worker: dict[int, int]  # device index -> worker node id
    cloud_id: int
    broker_id: int
    worker_ids: list[int]
    device_node: dict[int, int]  # device index -> node id

    def link(self, src: int, dst: int) -> LinkSpec:
        return self.links[(src, dst)]


def build_topology(config: SimConfig) -> Topology:
    if config.n_devices < 1:
        raise SimError("n_devices must be >= 1")
    rng = np.random.default_rng(derive_seed(config.seed, "topology"))
    lo, hi = config.bandwidth_mbits
    nodes = [
        NodeSpec(0, "cloud", config.cloud_ram_mb, config.cloud_cpu_ghz, config.packets_per_instruction),
        NodeSpec(1, "broker", config.edge_ram_mb, config.edge_cpu_ghz, config.packets_per_instruction),
    ]
    worker_ids = list(range(2, 2 + config.n_workers))
    nodes += [NodeSpec(w, "edge_worker", config.edge_ram_mb, config.edge_cpu_ghz,
                       config.packets_per_instruction) for w in worker_ids]
    links: dict[tuple[int, int], LinkSpec] = {}

    def connect(a, b):
        bw = float(rng.uniform(lo, hi))
        links[(a, b)] = LinkSpec(a, b, bw, config.latency_s)
        links[(b, a)] = LinkSpec(b, a, bw, config.latency_s)

    connect(1, 0)
    for w in worker_ids:
        connect(w, 1)
    first_dev = 2 + config.n_workers
    device_worker, device_node = {}, {}
    for d in range(config.n_devices):
        node_id = first_dev + d
        nodes.append(NodeSpec(node_id, "device", config.device_ram_mb, config.device_cpu_ghz,
                              config.packets_per_instruction))
        w = worker_ids[d % config.n_workers]
        device_worker[d] = w
        device_node[d] = node_id
        connect(node_id, w)
    return Topology(nodes, links, device_worker, 0, 1, worker_ids, device_node)


def transmission_delay(packet_size_bytes: float, link: LinkSpec) -> float:
    return 8.0 * packet_size_bytes / (link.bandwidth_mbits * 1e6) + link.latency_s


@dataclass
class SimReport:
    n_devices: int
    model: str
    devices_quarantined: int
    packets_emitted: int
    packets_delivered_direct: int
    packets_quarantined: int
    packets_blocked: int
    packets_released: int
    packets_scrub_dropped: int
    packets_discarded: int
    quarantine_confusion: ConfusionMatrix
    quarantine_accuracy: float | None
    episode_outcomes: dict[str, int]

    @property
    def packets_delivered(self) -> int:
        return self.packets_delivered_direct + self.packets_released

    def conservation_errors(self) -> list[str]:
        errs = []
        if self.packets_emitted != self.packets_delivered_direct + self.packets_quarantined + self.packets_blocked:
            errs.append("emitted != delivered_direct + quarantined + blocked")
        if self.packets_quarantined != self.packets_released + self.packets_scrub_dropped + self.packets_discarded:
            errs.append("quarantined != released + scrub_dropped + discarded")
        if self.quarantine_confusion.total != self.n_devices:
            errs.append("device confusion total != n_devices")
        if self.devices_quarantined != self.quarantine_confusion.tp + self.quarantine_confusion.fp:
            errs.append("devices_quarantined != tp + fp")
        return errs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["packets_delivered"] = self.packets_delivered
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SimReport:
        d = dict(d)
        d.pop("packets_delivered", None)
        d["quarantine_confusion"] = ConfusionMatrix(**d["quarantine_confusion"])
        return cls(**d)


def _device_confusion(quarantined: set, truth: dict[int, bool]) -> ConfusionMatrix:
    tp = sum(1 for d, a in truth.items() if a and d in quarantined)
    fp = sum(1 for d, a in truth.items() if not a and d in quarantined)
    fn = sum(1 for d, a in truth.items() if a and d not in quarantined)
    tn = len(truth) - tp - fp - fn
    return ConfusionMatrix(tp, fp, tn, fn)


def service_destination(schema: EncodingSchema):
    """Map a record to the index of its service one-hot (-1 when unseen)."""
    start = schema.block_offset("service")
    stop = start + len(schema.categorical_maps["service"])

    def dest(rec: EncodedRecord) -> int:
        block = rec.x[start:stop]
        k = int(np.argmax(block))
        return k if block[k] > 0 else -1

    return dest


class Simulation:
    def __init__(self, config: SimConfig, model, streams: list[DeviceStream],
                 schema: EncodingSchema | None = None, destination_fn=None):
        if len(streams) != config.n_devices:
            raise SimError(f"{len(streams)} streams for {config.n_devices} devices")
        self.config = config
        self.model = model
        self.streams = streams
        self.topology = build_topology(config)
        if destination_fn is None:
            destination_fn = service_destination(schema) if schema is not None else (lambda rec: 0)
        self.destination_of = destination_fn
        self.store = QuarantineStore(config.quarantine)
        self.trace: list[dict] = []
        self._queue: list = []
        self._seq = 0
        self.now = 0.0
        self.counts = Counter()
        self.quarantined_devices: set[int] = set()
        self._episode = Counter()  # device -> current episode number

    # -- queue -------------------------------------------------------------

    def _schedule(self, t: float, kind: str, device: int, k: int | None = None, extra=None):
        if t < self.now:
            raise SimError(f"causality violation: {kind} at {t} scheduled from {self.now}")
        heapq.heappush(self._queue, (t, self._seq, kind, device, k, extra))
        self._seq += 1

    def _log(self, kind: str, device: int, k: int | None, decision):
        rec_idx = None if k is None else self.streams[device].records[k].source_index
        self.trace.append({
            "t": self.now,
            "kind": kind,
            "device": device,
            "worker": self.topology.device_worker[device],
            "record_idx": rec_idx,
            "decision": decision,
            "truth": self.streams[device].is_attacker,
        })

    def _delay(self, src: int, dst: int) -> float:
        return transmission_delay(self.config.packet_size_bytes, self.topology.link(src, dst))

    # -- run ---------------------------------------------------------------

    def run(self) -> SimReport:
        cfg = self.config
        records = [r for s in self.streams for r in s.records]
        X = np.vstack([r.x for r in records])
        flat = self.model.predict(X)
        self._pred = []
        i = 0
        for s in self.streams:
            self._pred.append(flat[i : i + len(s.records)].astype(bool))
            i += len(s.records)

        rng = np.random.default_rng(derive_seed(cfg.seed, "emission"))
        phases = rng.uniform(0.0, min(cfg.emission_interval_s, cfg.duration_s), cfg.n_devices)
        for d in range(cfg.n_devices):
            self._schedule(float(phases[d]), "emit", d, 0)

        self._drain()
        # whatever is still pending closes at the end of the run
        self.now = max(self.now, cfg.duration_s)
        for device in sorted(self.store.entries):
            self._close(self.store.entries[device], force=True)
        self._drain()  # deliveries of records released just now
        return self._report()

    def _drain(self):
        while self._queue:
            t, _, kind, device, k, extra = heapq.heappop(self._queue)
            if kind == "quarantine_resolve" and t > self.config.duration_s:
                continue  # closed by the end-of-run sweep
            self.now = t
            getattr(self, "_on_" + kind)(device, k, extra)

    def _on_emit(self, d, k, extra):
        self.counts["emitted"] += 1
        self._log("emit", d, k, None)
        topo = self.topology
        self._schedule(self.now + self._delay(topo.device_node[d], topo.device_worker[d]),
                       "arrive_worker", d, k)
        nxt = k + 1
        t_next = self.now + self.config.emission_interval_s
        if nxt < len(self.streams[d].records) and t_next < self.config.duration_s:
            self._schedule(t_next, "emit", d, nxt)

    def _on_arrive_worker(self, d, k, extra):
        self._log("arrive_worker", d, k, None)
        self._schedule(self.now + self.config.worker_service_time_s, "classify", d, k)

    def _on_classify(self, d, k, extra):
        flagged = bool(self._pred[d][k])
        self._log("classify", d, k, "attack" if flagged else "normal")
        w = self.topology.device_worker[d]
        self._schedule(self.now + self._delay(w, self.topology.broker_id), "route", d, k, flagged)

    def _on_route(self, d, k, flagged):
        store = self.store
        entry = store.entries.get(d)
        if entry is not None and self.now >= entry.expires_at:
            self._close(entry)
            entry = None
        if store.is_blacklisted(d):
            self.counts["blocked"] += 1
            self._log("route", d, k, "blocked")
            return
        if entry is None and not flagged:
            self._log("route", d, k, "analytics")
            self._deliver(d, k, "direct")
            return
        self._log("route", d, k, "quarantine")
        decision = "buffer"
        if entry is None:
            w = self.topology.device_worker[d]
            entry = store.admit(d, f"worker-{w}/device-{d}", w, self.now)
            self._episode[d] += 1
            self.quarantined_devices.add(d)
            self._schedule(entry.expires_at, "quarantine_resolve", d, None, self._episode[d])
            decision = "admit"
        self.counts["quarantined"] += 1
        self._log("quarantine_arrival", d, k, decision)
        rec = self.streams[d].records[k]
        store.record_arrival(entry, rec, flagged, self.destination_of(rec), self.now)
        if store.should_blacklist_now(entry):
            self._close(entry)

    def _on_quarantine_resolve(self, d, k, episode):
        entry = self.store.entries.get(d)
        if entry is not None and self._episode[d] == episode:
            self._close(entry)

    def _on_deliver_analytics(self, d, k, how):
        self.counts["delivered_" + how] += 1
        self._log("deliver_analytics", d, k, how)

    def _deliver(self, d, k, how):
        w = self.topology.device_worker[d]
        self._schedule(self.now + self._delay(self.topology.broker_id, w), "deliver_analytics", d, k, how)

    def _close(self, entry, force=False) -> Resolution:
        res = self.store.resolve(entry, self.now, force=force)
        d = entry.device_id
        self.counts["episodes_" + res.outcome.value] += 1
        self._log("quarantine_resolve", d, None, res.outcome.value)
        positions = {id(rec): i for i, rec in enumerate(self.streams[d].records)}
        for group, label in ((res.released, "released"), (res.dropped, "scrub_dropped"),
                             (res.discarded, "discarded")):
            for item in group:
                k = positions[id(item.record)]
                self.counts[label] += 1
                self._log("quarantine_resolve", d, k, label)
                if label == "released":
                    self._deliver(d, k, "released")
        return res

    def _report(self) -> SimReport:
        c = self.counts
        truth = {s.device_id: s.is_attacker for s in self.streams}
        cm = _device_confusion(self.quarantined_devices, truth)
        return SimReport(
            n_devices=self.config.n_devices,
            model=getattr(self.model, "kind", type(self.model).__name__),
            devices_quarantined=len(self.quarantined_devices),
            packets_emitted=c["emitted"],
            packets_delivered_direct=c["delivered_direct"],
            packets_quarantined=c["quarantined"],
            packets_blocked=c["blocked"],
            packets_released=c["delivered_released"],
            packets_scrub_dropped=c["scrub_dropped"],
            packets_discarded=c["discarded"],
            quarantine_confusion=cm,
            quarantine_accuracy=accuracy(cm),
            episode_outcomes={"whitelist": c["episodes_whitelist"], "blacklist": c["episodes_blacklist"]},
        )


def run(config: SimConfig, model, streams: list[DeviceStream], schema: EncodingSchema | None = None,
        destination_fn=None) -> tuple[SimReport, list[dict], list[dict]]:
    """Run one simulation; returns ``(report, trace, episode_log)``."""
    sim = Simulation(config, model, streams, schema, destination_fn)
    report = sim.run()
    return report, sim.trace, sim.store.episode_log


def collect_metrics(trace: list[dict], model: str = "") -> SimReport:
    """Rebuild a :class:`SimReport` by recounting a trace."""
    counts = Counter()
    truth: dict[int, bool] = {}
    quarantined = set()
    for i, ev in enumerate(trace):
        try:
            kind, dev, decision = ev["kind"], ev["device"], ev["decision"]
        except (KeyError, TypeError):
            raise SimError(f"malformed trace event at line {i + 1}") from None
        if kind not in EVENT_KINDS:
            raise SimError(f"unknown event kind {kind!r} at line {i + 1}")
        if i and ev["t"] < trace[i - 1]["t"]:
            raise SimError(f"trace goes back in time at line {i + 1}")
        if kind == "emit":
            counts["emitted"] += 1
            truth[dev] = bool(ev["truth"])
        elif kind == "route" and decision == "blocked":
            counts["blocked"] += 1
        elif kind == "quarantine_arrival":
            counts["quarantined"] += 1
            if decision == "admit":
                quarantined.add(dev)
        elif kind == "quarantine_resolve":
            if ev["record_idx"] is None:
                counts["episodes_" + decision] += 1
            else:
                counts[decision] += 1
        elif kind == "deliver_analytics":
            counts["delivered_" + decision] += 1
    cm = _device_confusion(quarantined, truth)
    return SimReport(
        n_devices=len(truth),
        model=model,
        devices_quarantined=len(quarantined),
        packets_emitted=counts["emitted"],
        packets_delivered_direct=counts["delivered_direct"],
        packets_quarantined=counts["quarantined"],
        packets_blocked=counts["blocked"],
        packets_released=counts["delivered_released"],
        packets_scrub_dropped=counts["scrub_dropped"],
        packets_discarded=counts["discarded"],
        quarantine_confusion=cm,
        quarantine_accuracy=accuracy(cm) if cm.total else None,
        episode_outcomes={"whitelist": counts["episodes_whitelist"], "blacklist": counts["episodes_blacklist"]},
    )


SWEEP_DEVICES = tuple(range(50, 401, 50))


def sweep(config: SimConfig, models: dict, pool: list[EncodedRecord], device_counts=SWEEP_DEVICES,
          schema: EncodingSchema | None = None) -> list[SimReport]:
    """One report per (device count, model). Models at a point share the same streams."""
    reports = []
    for n in device_counts:
        point = replace(config, n_devices=n, seed=derive_seed(config.seed, "sweep", n))
        streams = make_streams(point, pool)
        for kind in models:
            reports.append(run(point, models[kind], streams, schema)[0])
    return reports


def make_streams(config: SimConfig, pool: list[EncodedRecord]) -> list[DeviceStream]:
    return partition_streams(
        pool, config.n_devices, config.attacker_ratio, derive_seed(config.seed, "streams"),
        records_per_device=config.records_per_device,
        attacker_mix=config.attacker_mix,
        normal_mix=config.normal_mix,
        attacker_threshold=config.attacker_threshold,
    )


def write_trace(trace: list[dict], path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for ev in trace:
            fh.write(json.dumps(ev) + "\n")
    return path


def read_trace(path) -> list[dict]:
    out = []
    with Path(path).open() as fh:
        for i, line in enumerate(fh, start=1):
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                raise SimError(f"{path}:{i}: not valid JSON") from None
    return out


def trace_invariant_errors(trace: list[dict]) -> list[str]:
    """Check ordering, the blacklist firewall and the scrub-once release path on a trace."""
    errs = []
    emitted_at: dict[tuple, float] = {}
    blacklisted_at: dict[int, float] = {}
    scrub_released = Counter()
    delivered_released = Counter()
    last_t = -float("inf")
    for i, ev in enumerate(trace):
        t, kind, dev, rec, decision = ev["t"], ev["kind"], ev["device"], ev["record_idx"], ev["decision"]
        if t < last_t:
            errs.append(f"line {i + 1}: time goes backwards")
        last_t = t
        if kind == "emit":
            emitted_at[(dev, rec)] = t
        elif kind == "quarantine_resolve":
            if rec is None and decision == "blacklist":
                blacklisted_at.setdefault(dev, t)
            elif decision == "released":
                scrub_released[(dev, rec)] += 1
        elif kind == "deliver_analytics":
            if dev in blacklisted_at and emitted_at.get((dev, rec), -1.0) >= blacklisted_at[dev]:
                errs.append(f"line {i + 1}: device {dev} delivered data emitted after its blacklisting")
            if decision == "released":
                delivered_released[(dev, rec)] += 1
    for key, n in delivered_released.items():
        if scrub_released[key] != n:
            errs.append(f"record {key} released {n} time(s) but scrubbed {scrub_released[key]} time(s)")
    return errs
