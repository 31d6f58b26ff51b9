"""Bounded-staleness parameter store.

Workers commit timestamped sparse updates and advance a per-worker clock. A
worker at clock t is guaranteed to see every update with timestamp at or
before t - s - 1 (s is the staleness bound) plus all of its own writes; it may
additionally see newer updates from others. A worker that runs more than s
clocks ahead of the slowest one blocks until the gap closes. With s = 0 the
protocol degenerates to fully synchronous lock-step execution.

All store activity can be recorded as a trace (one CSV line per event) that an
independent checker replays to verify the protocol guarantees.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import ProtocolError, TraceParseError

TRACE_HEADER = "tick,event,worker,clock,seq,timestamp,key_count,bytes"

_EVENTS = {
    "commit", "clock", "block", "unblock", "read", "apply", "finish",
    "compute_start", "compute_end", "msg_send", "msg_deliver",
}
# subset replayed by the staleness checker; the rest are simulator events
_PROTOCOL_EVENTS = {"commit", "clock", "block", "unblock", "read", "apply", "finish"}


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    event: str
    worker: int
    clock: int
    seq: int
    timestamp: int
    key_count: int
    bytes: int

    def to_line(self) -> str:
        return (
            f"{self.tick},{self.event},{self.worker},{self.clock},"
            f"{self.seq},{self.timestamp},{self.key_count},{self.bytes}"
        )

    @classmethod
    def from_line(cls, line: str, line_number: int = 0) -> "TraceEvent":
        parts = line.strip().split(",")
        if len(parts) != 8:
            raise TraceParseError(line_number, f"expected 8 fields, got {len(parts)}")
        if parts[1] not in _EVENTS:
            raise TraceParseError(line_number, f"unknown event {parts[1]!r}")
        try:
            nums = [int(parts[i]) for i in (0, 2, 3, 4, 5, 6, 7)]
        except ValueError as e:
            raise TraceParseError(line_number, str(e)) from None
        return cls(nums[0], parts[1], nums[1], nums[2], nums[3], nums[4], nums[5], nums[6])


class Trace:
    """An ordered event log with CSV round-tripping."""

    def __init__(self, events: Optional[list[TraceEvent]] = None):
        self.events: list[TraceEvent] = events or []

    def append(self, event: TraceEvent) -> None:
        self.events.append(event)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def to_text(self) -> str:
        lines = [TRACE_HEADER]
        lines.extend(e.to_line() for e in self.events)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Trace":
        lines = text.splitlines()
        if not lines:
            raise TraceParseError(0, "empty trace")
        if lines[0].strip() != TRACE_HEADER:
            raise TraceParseError(1, f"bad header {lines[0]!r}")
        events = []
        for i, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            events.append(TraceEvent.from_line(line, i))
        return cls(events)


@dataclass
class _Update:
    seq: int
    worker: int
    timestamp: int
    payload: dict[int, float]

    def bytes(self) -> int:
        # matches the sparse wire codec: 25 byte header + 12 per entry
        return 25 + 12 * len(self.payload)


class SspCore:
    """Single-threaded bounded-staleness store driven by an external clock.

    The caller owns the notion of time (``tick``); the store records protocol
    events against it. Each worker sees the base values plus a per-worker set
    of applied updates. ``catch_up`` applies exactly the updates the protocol
    obliges a worker to see; ``apply_pending`` opportunistically applies
    everything already committed (fresher-than-required reads are allowed).
    """

    def __init__(self, P: int, staleness: int, m: int, trace: Optional[Trace] = None):
        if P < 1:
            raise ProtocolError("P must be >= 1")
        if staleness < 0:
            raise ProtocolError("staleness bound must be >= 0")
        self.P = P
        self.staleness = staleness
        self.m = m
        self.trace = trace if trace is not None else Trace()
        self.tick = 0
        self.clocks = [0] * P
        self.finished = [False] * P
        self.blocked = [False] * P
        self.views = [np.zeros(m) for _ in range(P)]
        self.log: list[_Update] = []
        # seqs committed by others and not yet folded into this worker's view
        self.unapplied: list[list[int]] = [[] for _ in range(P)]
        self._seq = 0

    # -- event helpers ------------------------------------------------------

    def _emit(self, event: str, worker: int, seq: int = 0, timestamp: int = 0,
              key_count: int = 0, nbytes: int = 0) -> None:
        self.trace.append(
            TraceEvent(self.tick, event, worker, self.clocks[worker], seq,
                       timestamp, key_count, nbytes)
        )

    def set_tick(self, tick: int) -> None:
        self.tick = tick

    # -- protocol -----------------------------------------------------------

    def min_clock(self) -> int:
        """Minimum clock over unfinished workers; finished ones do not hold
        anyone back."""
        active = [self.clocks[p] for p in range(self.P) if not self.finished[p]]
        if not active:
            return max(self.clocks)
        return min(active)

    def commit(self, worker: int, payload: dict[int, float], timestamp: int) -> int:
        """Publish a timestamped update; the writer sees it immediately."""
        self._check_worker(worker)
        if timestamp != self.clocks[worker]:
            raise ProtocolError(
                f"commit timestamp {timestamp} != worker {worker} clock "
                f"{self.clocks[worker]}"
            )
        upd = _Update(self._seq, worker, timestamp, dict(payload))
        self._seq += 1
        self.log.append(upd)
        for p in range(self.P):
            if p != worker:
                self.unapplied[p].append(upd.seq)
        _apply(self.views[worker], upd.payload)
        self._emit("commit", worker, seq=upd.seq, timestamp=timestamp,
                   key_count=len(upd.payload), nbytes=upd.bytes())
        return upd.seq

    def advance_clock(self, worker: int) -> bool:
        """End the worker's current clock period. Returns True if the worker
        must now wait for stragglers before computing again."""
        self._check_worker(worker)
        if self.finished[worker]:
            raise ProtocolError(f"worker {worker} already finished")
        self.clocks[worker] += 1
        self._emit("clock", worker)
        if self.would_block(worker):
            self.blocked[worker] = True
            self._emit("block", worker)
            return True
        return False

    def would_block(self, worker: int) -> bool:
        return self.clocks[worker] - self.min_clock() > self.staleness

    def release_unblocked(self) -> list[int]:
        """Clear the blocked flag for workers whose gap has closed."""
        released = []
        for p in range(self.P):
            if self.blocked[p] and not self.would_block(p):
                self.blocked[p] = False
                self._emit("unblock", p)
                released.append(p)
        return released

    def catch_up(self, worker: int, allowed=None) -> list[_Update]:
        """Apply every foreign update the protocol requires this worker to see
        (timestamp <= t_p - staleness - 1). Returns the updates applied.

        `allowed`, when given, restricts application to those seqs (updates
        whose messages have actually arrived at the worker); the caller is
        then responsible for not reading before the guarantee is met.
        """
        self._check_worker(worker)
        horizon = self.clocks[worker] - self.staleness - 1
        keep: list[int] = []
        applied: list[_Update] = []
        for seq in self.unapplied[worker]:
            upd = self.log[seq]
            if upd.timestamp <= horizon and (allowed is None or seq in allowed):
                _apply(self.views[worker], upd.payload)
                applied.append(upd)
                self._emit("apply", worker, seq=upd.seq, timestamp=upd.timestamp,
                           key_count=len(upd.payload), nbytes=upd.bytes())
            else:
                keep.append(seq)
        self.unapplied[worker] = keep
        return applied

    def apply_pending(self, worker: int, allowed=None) -> list[_Update]:
        """Apply committed foreign updates regardless of age (reads may be
        fresher than the guarantee), optionally limited to `allowed` seqs."""
        self._check_worker(worker)
        applied = []
        keep: list[int] = []
        for seq in self.unapplied[worker]:
            if allowed is not None and seq not in allowed:
                keep.append(seq)
                continue
            upd = self.log[seq]
            _apply(self.views[worker], upd.payload)
            applied.append(upd)
            self._emit("apply", worker, seq=upd.seq, timestamp=upd.timestamp,
                       key_count=len(upd.payload), nbytes=upd.bytes())
        self.unapplied[worker] = keep
        return applied

    def missing_required(self, worker: int, available) -> list[int]:
        """Seqs the protocol obliges this worker to see that are not yet in
        `available` (e.g. still in the network)."""
        self._check_worker(worker)
        horizon = self.clocks[worker] - self.staleness - 1
        return [
            seq for seq in self.unapplied[worker]
            if self.log[seq].timestamp <= horizon and seq not in available
        ]

    def would_block_if_advanced(self, worker: int) -> bool:
        return self.clocks[worker] + 1 - self.min_clock() > self.staleness

    def read(self, worker: int, allowed=None) -> np.ndarray:
        """Snapshot satisfying the staleness guarantee for this worker."""
        self._check_worker(worker)
        self.catch_up(worker, allowed)
        self._emit("read", worker)
        return self.views[worker].copy()

    def finish(self, worker: int) -> None:
        """Mark a worker done; its clock stops counting toward the minimum."""
        self._check_worker(worker)
        self.finished[worker] = True
        self.blocked[worker] = False
        self._emit("finish", worker)

    def snapshot(self) -> np.ndarray:
        """Fully synchronized state: base plus every committed update."""
        out = np.zeros(self.m)
        for upd in self.log:
            _apply(out, upd.payload)
        return out

    def _check_worker(self, worker: int) -> None:
        if not (0 <= worker < self.P):
            raise ProtocolError(f"invalid worker id {worker}")


def _apply(values: np.ndarray, payload: dict[int, float]) -> None:
    for j in sorted(payload):
        values[j] += payload[j]


# ---------------------------------------------------------------------------
# independent trace checker


@dataclass
class InvariantReport:
    ok: bool
    violations: list[str]
    max_clock_gap: int
    mean_read_staleness: float


def check_staleness_invariants(trace: Trace, staleness: int, P: int) -> InvariantReport:
    """Replay a trace and verify the bounded-staleness protocol.

    Checked, independently of any store internals:

    1. bounded clock drift: no worker computes (commits or reads) at clock t
       while an unfinished worker sits below t - staleness;
    2. every update's timestamp equals its writer's clock at commit time;
    3. state guarantee: at each read by a worker at clock t, every committed
       update with timestamp <= t - staleness - 1 has been applied at that
       worker (extra fresher applies are fine);
    4. read-my-writes: a worker's own commits are visible to it immediately,
       so they must never appear in its applied-from-others stream.
    """
    violations: list[str] = []
    clocks = [0] * P
    finished = [False] * P
    blocked = [False] * P
    committed: dict[int, TraceEvent] = {}
    applied: list[set[int]] = [set() for _ in range(P)]
    # per worker, committed foreign seqs not yet applied there (small, since
    # workers catch up every clock; avoids rescanning all commits per read)
    outstanding: list[dict[int, int]] = [dict() for _ in range(P)]  # seq -> ts
    max_gap = 0
    read_staleness_sum = 0.0
    read_count = 0

    def active_min() -> int:
        active = [clocks[p] for p in range(P) if not finished[p]]
        return min(active) if active else max(clocks)

    for i, ev in enumerate(trace):
        if ev.event not in _PROTOCOL_EVENTS:
            continue
        w = ev.worker
        if not (0 <= w < P):
            violations.append(f"event {i}: worker {w} out of range")
            continue
        if ev.event == "clock":
            clocks[w] += 1
            if ev.clock != clocks[w]:
                violations.append(
                    f"event {i}: worker {w} clock field {ev.clock} != "
                    f"replayed clock {clocks[w]}"
                )
            max_gap = max(max_gap, clocks[w] - active_min())
        elif ev.event == "block":
            blocked[w] = True
        elif ev.event == "unblock":
            if clocks[w] - active_min() > staleness:
                violations.append(
                    f"event {i}: worker {w} unblocked at clock {clocks[w]} "
                    f"while min clock is {active_min()}"
                )
            blocked[w] = False
        elif ev.event == "finish":
            finished[w] = True
        elif ev.event == "commit":
            if blocked[w]:
                violations.append(f"event {i}: worker {w} committed while blocked")
            if ev.timestamp != clocks[w]:
                violations.append(
                    f"event {i}: commit timestamp {ev.timestamp} != worker "
                    f"{w} clock {clocks[w]}"
                )
            if clocks[w] - active_min() > staleness:
                violations.append(
                    f"event {i}: worker {w} computing at clock {clocks[w]} "
                    f"while min clock is {active_min()} (bound {staleness})"
                )
            if ev.seq in committed:
                violations.append(f"event {i}: duplicate commit seq {ev.seq}")
            committed[ev.seq] = ev
            for p in range(P):
                if p != w:
                    outstanding[p][ev.seq] = ev.timestamp
        elif ev.event == "apply":
            if ev.seq not in committed:
                violations.append(f"event {i}: applied unknown seq {ev.seq}")
                continue
            src = committed[ev.seq]
            if src.worker == w:
                violations.append(
                    f"event {i}: worker {w} re-applied its own seq {ev.seq} "
                    "(own writes must already be visible)"
                )
            if ev.seq in applied[w]:
                violations.append(f"event {i}: worker {w} double-applied seq {ev.seq}")
            applied[w].add(ev.seq)
            outstanding[w].pop(ev.seq, None)
            read_staleness_sum += clocks[w] - src.timestamp
            read_count += 1
        elif ev.event == "read":
            if blocked[w]:
                violations.append(f"event {i}: worker {w} read while blocked")
            horizon = clocks[w] - staleness - 1
            for seq, ts in outstanding[w].items():
                if ts <= horizon:
                    violations.append(
                        f"event {i}: worker {w} read at clock {clocks[w]} "
                        f"missing required update seq {seq} (timestamp {ts})"
                    )

    return InvariantReport(
        ok=not violations,
        violations=violations,
        max_clock_gap=max_gap,
        mean_read_staleness=read_staleness_sum / read_count if read_count else 0.0,
    )


# ---------------------------------------------------------------------------
# threaded store


class ThreadedSspStore:
    """Thread-safe wrapper whose ``clock`` call really blocks the calling
    thread until the staleness gap closes. Intended for smoke-testing the
    protocol with genuine concurrency; the simulator uses ``SspCore``."""

    def __init__(self, P: int, staleness: int, m: int):
        self.core = SspCore(P, staleness, m)
        self._cond = threading.Condition()

    def read(self, worker: int) -> np.ndarray:
        with self._cond:
            return self.core.read(worker)

    def commit(self, worker: int, payload: dict[int, float], timestamp: int) -> int:
        with self._cond:
            return self.core.commit(worker, payload, timestamp)

    def clock(self, worker: int) -> None:
        with self._cond:
            self.core.advance_clock(worker)
            self._cond.notify_all()
            while self.core.would_block(worker):
                self._cond.wait()
            self.core.release_unblocked()

    def finish(self, worker: int) -> None:
        with self._cond:
            self.core.finish(worker)
            self._cond.notify_all()

    def snapshot(self) -> np.ndarray:
        with self._cond:
            return self.core.snapshot()
