"""Broker-side data quarantine: short-term store, spam scoring, reputation, scrubbing.

A device flagged by a worker is admitted into the :class:`QuarantineStore`
for ``quarantine_ttl`` simulated seconds. Everything it sends meanwhile is
buffered and scored. An episode ends in one of two ways:

* blacklist - as soon as any spam score reaches ``ss_threshold``, or at
  expiry if the smoothed reputation fell below ``blacklist_cut``; buffered
  data is discarded and the broker drops the device from then on;
* whitelist - at expiry otherwise; buffered data goes through :func:`scrub`
  and the records that pass are released to analytics.
"""

from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import EncodedRecord


class QuarantineError(RuntimeError):
    pass


class QuarantineExpired(QuarantineError):
    """An arrival came in at or after the entry's expiry; resolve it first."""


class Status(str, enum.Enum):
    PENDING = "pending"
    WHITELIST = "whitelist"
    BLACKLIST = "blacklist"


@dataclass(frozen=True)
class QuarantineConfig:
    quarantine_ttl: float = 30.0
    si_min: float = 0.001
    si_init: float = 1.0
    ss_threshold: float = 9.0
    alpha: float = 0.7
    blacklist_cut: float = 0.3
    initial_reputation: float = 0.5
    scrub_threshold: float = 0.75


@dataclass
class SpamStats:
    nsd: int = 0
    nmd: int = 0
    nss: int = 0
    last_attack_at: float | None = None
    si: float = 1.0


@dataclass(frozen=True)
class SpamScore:
    value: float
    computed_at: float = 0.0


def spam_score(stats: SpamStats, si_min: float = 0.001, now: float = 0.0) -> SpamScore:
    """(NSD + NMD * NSS) / SI, with SI floored at ``si_min``."""
    if stats.nss == 0 and stats.nsd == 0 and stats.nmd == 0:
        return SpamScore(0.0, now)
    return SpamScore((stats.nsd + stats.nmd * stats.nss) / max(stats.si, si_min), now)


@dataclass
class ReputationEntry:
    device_id: int
    score: float = 0.5
    status: Status = Status.PENDING
    history: list[tuple[float, float]] = field(default_factory=list)


def update_reputation(rep: ReputationEntry, ss: SpamScore, alpha: float = 0.7,
                      ss_threshold: float = 9.0) -> ReputationEntry:
    """Exponentially smooth the trust score toward ``1 - min(SS/threshold, 1)``."""
    if rep.status is not Status.PENDING:
        raise QuarantineError(f"device {rep.device_id}: reputation is {rep.status.value}, not pending")
    target = 1.0 - min(ss.value / ss_threshold, 1.0)
    rep.score = min(max(alpha * rep.score + (1.0 - alpha) * target, 0.0), 1.0)
    rep.history.append((ss.computed_at, ss.value))
    return rep


@dataclass(frozen=True, eq=False)
class BufferedRecord:
    record: EncodedRecord
    arrived_at: float
    is_attack: bool = False
    destination_id: int = -1


@dataclass
class QuarantineEntry:
    device_id: int
    device_location: str
    worker_id: int
    admitted_at: float
    expires_at: float
    spam_stats: SpamStats
    reputation: ReputationEntry
    buffered_records: list[BufferedRecord] = field(default_factory=list)
    destinations: Counter = field(default_factory=Counter)
    max_ss: float = 0.0

    @property
    def attacks(self) -> int:
        return self.spam_stats.nss


# --- scrubbing ---------------------------------------------------------------


@dataclass
class ScrubContext:
    """What has already been released for one device."""

    released: set = field(default_factory=set)
    last_released_at: float = -math.inf


@dataclass(frozen=True)
class ScrubRule:
    rule_id: str
    check: Callable[[BufferedRecord, ScrubContext], bool]
    weight: float


def _fingerprint(item: BufferedRecord) -> bytes:
    return np.ascontiguousarray(item.record.x).tobytes()


def default_rules() -> list[ScrubRule]:
    return [
        ScrubRule("finite", lambda it, ctx: bool(np.all(np.isfinite(it.record.x))), 0.25),
        ScrubRule("in_range", lambda it, ctx: bool(np.all((it.record.x >= -0.05) & (it.record.x <= 1.05))), 0.25),
        ScrubRule("not_duplicate", lambda it, ctx: _fingerprint(it) not in ctx.released, 0.25),
        ScrubRule("monotone_time", lambda it, ctx: it.arrived_at >= ctx.last_released_at, 0.25),
    ]


@dataclass(frozen=True)
class ScrubReport:
    records_in: int
    records_released: int
    records_dropped: int
    mean_scrub_score: float


def scrub(items, rules: list[ScrubRule] | None = None, threshold: float = 0.75,
          context: ScrubContext | None = None) -> tuple[list[BufferedRecord], ScrubReport]:
    """Score each buffered record against ``rules`` and release the consistent ones.

    A record is released when its weighted pass score reaches ``threshold``
    and it is not an exact duplicate of something already released; a
    duplicate is dropped whatever its score. ``context`` carries the
    device's release history across calls and is updated in place.
    Plain :class:`EncodedRecord` items are accepted and treated as arriving
    in list order.
    """
    rules = default_rules() if rules is None else rules
    if not rules:
        raise ValueError("scrubbing needs at least one rule")
    if not math.isclose(sum(r.weight for r in rules), 1.0, abs_tol=1e-9):
        raise ValueError("scrub rule weights must sum to 1")
    if any(r.weight <= 0 for r in rules):
        raise ValueError("scrub rule weights must be positive")
    ctx = ScrubContext() if context is None else context
    items = [it if isinstance(it, BufferedRecord) else BufferedRecord(it, float(i)) for i, it in enumerate(items)]
    released, scores = [], []
    for it in items:
        score = sum(r.weight for r in rules if r.check(it, ctx))
        scores.append(score)
        fp = _fingerprint(it)
        if score >= threshold - 1e-12 and fp not in ctx.released:
            released.append(it)
            ctx.released.add(fp)
            ctx.last_released_at = max(ctx.last_released_at, it.arrived_at)
    report = ScrubReport(len(items), len(released), len(items) - len(released),
                         float(np.mean(scores)) if scores else 0.0)
    return released, report


# --- the store ---------------------------------------------------------------


@dataclass
class Resolution:
    entry: QuarantineEntry
    outcome: Status
    resolved_at: float
    released: list[BufferedRecord]
    dropped: list[BufferedRecord]
    discarded: list[BufferedRecord]
    scrub_report: ScrubReport | None

    def log_line(self) -> dict:
        e = self.entry
        return {
            "device_id": e.device_id,
            "admitted_at": e.admitted_at,
            "resolved_at": self.resolved_at,
            "outcome": self.outcome.value,
            "max_ss": e.max_ss,
            "final_reputation": e.reputation.score,
            "records_buffered": len(e.buffered_records),
            "records_released": len(self.released),
            "records_dropped": len(self.dropped) + len(self.discarded),
        }


class QuarantineStore:
    """In-memory short-term quarantine storage keyed by device id.

    Single-writer: meant to be driven from one event loop.
    """

    def __init__(self, config: QuarantineConfig | None = None, rules: list[ScrubRule] | None = None):
        self.config = config or QuarantineConfig()
        self.rules = default_rules() if rules is None else rules
        self.entries: dict[int, QuarantineEntry] = {}
        self.status: dict[int, Status] = {}
        self.scrub_contexts: dict[int, ScrubContext] = {}
        self.episode_log: list[dict] = []

    def __len__(self):
        return len(self.entries)

    def is_pending(self, device_id: int) -> bool:
        return device_id in self.entries

    def is_blacklisted(self, device_id: int) -> bool:
        return self.status.get(device_id) is Status.BLACKLIST

    def admit(self, device_id: int, device_location: str, worker_id: int, now: float) -> QuarantineEntry:
        if device_id in self.entries:
            raise QuarantineError(f"device {device_id} is already quarantined")
        if self.is_blacklisted(device_id):
            raise QuarantineError(f"device {device_id} is blacklisted; its traffic should be dropped")
        cfg = self.config
        entry = QuarantineEntry(
            device_id=device_id,
            device_location=device_location,
            worker_id=worker_id,
            admitted_at=now,
            expires_at=now + cfg.quarantine_ttl,
            spam_stats=SpamStats(si=cfg.si_init),
            reputation=ReputationEntry(device_id, cfg.initial_reputation),
        )
        self.entries[device_id] = entry
        self.status[device_id] = Status.PENDING
        return entry

    def record_arrival(self, entry: QuarantineEntry, record: EncodedRecord, is_attack: bool,
                       destination_id: int, now: float) -> QuarantineEntry:
        if self.entries.get(entry.device_id) is not entry:
            raise QuarantineError(f"device {entry.device_id} has no pending quarantine entry")
        if now >= entry.expires_at:
            raise QuarantineExpired(f"device {entry.device_id}: entry expired at {entry.expires_at}")
        if entry.buffered_records and now < entry.buffered_records[-1].arrived_at:
            raise QuarantineError("arrivals must be time-ordered")
        cfg = self.config
        st = entry.spam_stats
        if is_attack:
            modal = entry.destinations.most_common(1)[0][0] if entry.destinations else destination_id
            st.nss += 1
            if destination_id == modal:
                st.nsd += 1
            else:
                st.nmd += 1
            if st.last_attack_at is not None:
                st.si = max(now - st.last_attack_at, cfg.si_min)
            st.last_attack_at = now
        entry.destinations[destination_id] += 1
        entry.buffered_records.append(BufferedRecord(record, now, is_attack, destination_id))
        ss = spam_score(st, cfg.si_min, now)
        entry.max_ss = max(entry.max_ss, ss.value)
        update_reputation(entry.reputation, ss, cfg.alpha, cfg.ss_threshold)
        return entry

    def should_blacklist_now(self, entry: QuarantineEntry) -> bool:
        return entry.max_ss >= self.config.ss_threshold

    def resolve(self, entry: QuarantineEntry, now: float, force: bool = False) -> Resolution:
        """Close an episode. Needs expiry, an early-blacklist condition, or ``force``."""
        if self.entries.get(entry.device_id) is not entry:
            raise QuarantineError(f"device {entry.device_id} is not pending")
        early = self.should_blacklist_now(entry)
        if not (force or early or now >= entry.expires_at):
            raise QuarantineError(f"device {entry.device_id}: episode runs until {entry.expires_at}")
        cfg = self.config
        del self.entries[entry.device_id]
        if early or entry.reputation.score < cfg.blacklist_cut:
            outcome = Status.BLACKLIST
            released, dropped, discarded, report = [], [], list(entry.buffered_records), None
        else:
            outcome = Status.WHITELIST
            ctx = self.scrub_contexts.setdefault(entry.device_id, ScrubContext())
            released, report = scrub(entry.buffered_records, self.rules, cfg.scrub_threshold, ctx)
            kept = {id(r) for r in released}
            dropped = [r for r in entry.buffered_records if id(r) not in kept]
            discarded = []
        entry.reputation.status = outcome
        self.status[entry.device_id] = outcome
        res = Resolution(entry, outcome, now, released, dropped, discarded, report)
        self.episode_log.append(res.log_line())
        return res

    def evict_expired(self, now: float) -> int:
        """Resolve and remove every entry with ``expires_at <= now``."""
        due = sorted((e for e in self.entries.values() if e.expires_at <= now),
                     key=lambda e: (e.expires_at, e.device_id))
        for e in due:
            self.resolve(e, now)
        return len(due)
