"""Bandwidth Report pipeline between the eNB MAC and the CMTS scheduler.

At each report period the eNB summarises the uplink grants it has just
decided into a :class:`BwrMessage`.  The message travels as ordinary
payload on the cable modem's UGS flow, and an API in front of the CMTS
turns each entry into a request whose grant may not start before the data
is expected at the modem.

Wire format (little-endian, zero-padded to ``encoded_size``)::

    header   seq u32 | generated_at_us u64 | mode u8 | n_entries u8
    BULK     arrival_us u64 | bytes u32
    PER_LCG  arrival_us u64 | lcg0 u32 | lcg1 u32 | lcg2 u32 | lcg3 u32
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Optional, Sequence, Union

from .docsis import (DocsisMac, FlowKind, PhyConfig, ReqOrigin, ReqRecord,
                     earliest_start_slot)
from .lte import N_LCG, GrantNotification
from .sim_core import Engine

HEADER = struct.Struct("<IQBB")
BULK_ENTRY = struct.Struct("<QI")
LCG_ENTRY = struct.Struct("<QIIII")
DEFAULT_ENCODED_SIZE = 80


class BwrError(ValueError):
    pass


class BwrMode(IntEnum):
    BULK = 0
    PER_LCG = 1


Counts = Union[int, tuple]


@dataclass
class BwrMessage:
    seq: int
    generated_at: int
    mode: BwrMode
    entries: list = field(default_factory=list)   # (expected_cm_arrival, bytes or 4 counts)
    encoded_size: int = DEFAULT_ENCODED_SIZE

    def total_bytes(self) -> int:
        if self.mode == BwrMode.BULK:
            return sum(b for _, b in self.entries)
        return sum(sum(c) for _, c in self.entries)

    @property
    def content_size(self) -> int:
        entry = BULK_ENTRY if self.mode == BwrMode.BULK else LCG_ENTRY
        return HEADER.size + entry.size * len(self.entries)


def encode(msg: BwrMessage) -> bytes:
    if len(msg.entries) > 255:
        raise BwrError("too many entries for one report")
    parts = [HEADER.pack(msg.seq, msg.generated_at, int(msg.mode), len(msg.entries))]
    for arrival, counts in msg.entries:
        if msg.mode == BwrMode.BULK:
            parts.append(BULK_ENTRY.pack(arrival, counts))
        else:
            parts.append(LCG_ENTRY.pack(arrival, *counts))
    raw = b"".join(parts)
    if len(raw) > msg.encoded_size:
        raise BwrError(
            f"report needs {len(raw)} B but the encoded size is {msg.encoded_size} B")
    return raw.ljust(msg.encoded_size, b"\0")


def decode(data: bytes) -> BwrMessage:
    if len(data) < HEADER.size:
        raise BwrError("truncated report header")
    seq, generated_at, mode, n = HEADER.unpack_from(data, 0)
    try:
        mode = BwrMode(mode)
    except ValueError:
        raise BwrError(f"unknown report mode {mode}") from None
    entry = BULK_ENTRY if mode == BwrMode.BULK else LCG_ENTRY
    need = HEADER.size + n * entry.size
    if len(data) < need:
        raise BwrError(f"report declares {n} entries but carries {len(data)} B")
    entries = []
    off = HEADER.size
    for _ in range(n):
        fields = entry.unpack_from(data, off)
        off += entry.size
        if mode == BwrMode.BULK:
            entries.append((fields[0], fields[1]))
        else:
            entries.append((fields[0], tuple(fields[1:])))
    return BwrMessage(seq, generated_at, mode, entries, encoded_size=len(data))


def generate_bwr(seq: int, grants: Iterable[GrantNotification], now: int,
                 mode: BwrMode = BwrMode.BULK, bucket_subframes: int = 1,
                 encoded_size: int = DEFAULT_ENCODED_SIZE) -> BwrMessage:
    """Summarise grant notifications into one report.

    Grants whose transmit subframes fall in the same ``bucket_subframes``-wide
    bucket share one entry; per-UE grants of a subframe are always merged.
    The entry's arrival time is the latest expected arrival in the bucket so
    that every reported byte is at the modem when the grant starts.
    """
    buckets: dict[int, list] = {}
    for g in grants:
        key = g.tx_subframe // bucket_subframes
        slot = buckets.get(key)
        if slot is None:
            slot = buckets[key] = [g.expected_cm_arrival, [0] * N_LCG]
        slot[0] = max(slot[0], g.expected_cm_arrival)
        for i, b in enumerate(g.lcg_split):
            slot[1][i] += b
    entries = []
    for key in sorted(buckets):
        arrival, split = buckets[key]
        if arrival <= now:
            raise BwrError(f"grant expected at {arrival} us is not in the future of {now} us")
        if mode == BwrMode.BULK:
            entries.append((arrival, sum(split)))
        else:
            entries.append((arrival, tuple(split)))
    return BwrMessage(seq, now, mode, entries, encoded_size)


class BwrGenerator:
    """eNB-side report generation on a fixed period."""

    def __init__(self, engine: Engine, period: int, subframe: int,
                 mode: BwrMode = BwrMode.BULK, encoded_size: int = DEFAULT_ENCODED_SIZE,
                 phase: int = 0, sink: Optional[Callable[[BwrMessage], None]] = None):
        if period <= 0 or period % subframe:
            raise BwrError(f"report period {period} us must be a multiple of the "
                           f"subframe {subframe} us")
        self.engine = engine
        self.period = period
        self.bucket_subframes = period // subframe
        self.mode = mode
        self.encoded_size = encoded_size
        self.phase = phase
        self.sink = sink
        self._notes: list[GrantNotification] = []
        self._window_end: Optional[int] = None
        self._seq = 0
        self.messages: list[BwrMessage] = []
        self.generated_bytes = 0

    def on_grant(self, note: GrantNotification) -> None:
        self._notes.append(note)

    def start(self) -> None:
        self.engine.schedule(self.phase, "bwr", "generate", self._tick)

    def _tick(self) -> None:
        now = self.engine.now
        self.report(self._window_end if self._window_end is not None else -1, now)
        self.engine.after(self.period, "bwr", "generate", self._tick)

    def report(self, window_start: int, window_end: int) -> BwrMessage:
        """Report grants decided in (window_start, window_end]."""
        if self._window_end is not None and window_start < self._window_end:
            raise BwrError(
                f"report window ({window_start}, {window_end}] overlaps the previous "
                f"one ending at {self._window_end}")
        inside = [n for n in self._notes if window_start < n.decision_time <= window_end]
        self._notes = [n for n in self._notes if n.decision_time > window_end]
        self._window_end = window_end
        self._seq += 1
        msg = generate_bwr(self._seq, inside, window_end, self.mode,
                           self.bucket_subframes, self.encoded_size)
        encode(msg)   # rejects reports that do not fit the budget
        self.messages.append(msg)
        self.generated_bytes += msg.encoded_size
        if self.sink is not None:
            self.sink(msg)
        return msg


def check_transport(encoded_size: int, grant_size_bytes: int) -> None:
    if encoded_size > grant_size_bytes:
        raise BwrError(f"report of {encoded_size} B does not fit the {grant_size_bytes} B "
                       f"UGS grant")


def transport_bound(grant_interval: int, grants_per_interval: int, jitter_bound: int,
                    encoded_size: int, phy: PhyConfig) -> int:
    """Worst-case time from report generation to its arrival at the CMTS."""
    serial = phy.slot_time(phy.slots_for(encoded_size))
    return grant_interval // grants_per_interval + jitter_bound + serial


class BwrTransport:
    """Carries reports over the modem's UGS flow and meters the signalling rate."""

    def __init__(self, mac: DocsisMac, ugs_sid: int):
        flow = mac.flows.get(ugs_sid)
        if flow is None or flow.kind != FlowKind.UGS:
            raise BwrError(f"SID {ugs_sid} is not a UGS flow")
        self.mac = mac
        self.sid = ugs_sid
        self.flow = flow
        self.sent_bytes = 0
        self.sent = 0
        self.deliveries: list[tuple[int, int]] = []   # (generated_at, cmts arrival)
        self.on_delivery: Optional[Callable[[BwrMessage], None]] = None
        mac.on_ugs_payload = self._arrived

    def transport_bwr(self, msg: BwrMessage) -> None:
        check_transport(msg.encoded_size, self.flow.grant_size_bytes)
        self.mac.queue_ugs_payload(self.sid, encode(msg), msg.encoded_size)

    def _arrived(self, payload: bytes, size: int) -> None:
        msg = decode(payload)
        self.sent += 1
        self.sent_bytes += size
        self.deliveries.append((msg.generated_at, self.mac.engine.now))
        if self.on_delivery is not None:
            self.on_delivery(msg)


@dataclass
class BwrApiState:
    last_seq: int = 0
    pending: list = field(default_factory=list)
    waste_counter: int = 0
    gaps: int = 0
    dropped: int = 0
    late: int = 0
    translated: int = 0


def api_translate(msg: BwrMessage, state: BwrApiState, now: int,
                  sids: Sequence[int], frame_overhead: int = 0) -> list[ReqRecord]:
    """Turn one report into ordinary scheduler requests.

    ``sids`` holds one SID for BULK reports or four (LCG order, highest
    priority first) for PER_LCG reports.
    """
    if msg.seq <= state.last_seq:
        state.dropped += 1
        return []
    if msg.seq > state.last_seq + 1:
        state.gaps += msg.seq - state.last_seq - 1
    state.last_seq = msg.seq
    out = []
    for arrival, counts in msg.entries:
        if arrival < now:
            state.late += 1
            arrival = now
        if msg.mode == BwrMode.BULK:
            parts = [(sids[0], counts)]
        else:
            if len(sids) < N_LCG:
                raise BwrError("PER_LCG reports need four data SIDs")
            parts = list(zip(sids, counts))
        for sid, nbytes in parts:
            if nbytes <= 0:
                continue
            out.append(ReqRecord(sid, nbytes + frame_overhead, now, ReqOrigin.BWR_API,
                                 earliest_grant_time=max(arrival, 1)))
    state.translated += len(out)
    return out


@dataclass
class Placement:
    eligible: bool
    start_slot: Optional[int]


def jit_slack_policy(record: ReqRecord, window_start: int, window_end: int,
                     phy: PhyConfig, jit_guard: int = 0) -> Placement:
    """Where a BWR-originated request may land in the MAP window [start, end)."""
    slot = earliest_start_slot(record, window_start, window_end, phy, jit_guard)
    return Placement(slot is not None, slot)


class BwrApi:
    """CMTS-side API: receives reports and feeds the unchanged scheduler."""

    def __init__(self, mac: DocsisMac, sids: Sequence[int]):
        self.mac = mac
        self.sids = list(sids)
        self.state = BwrApiState()

    def on_bwr(self, msg: BwrMessage) -> None:
        records = api_translate(msg, self.state, self.mac.engine.now, self.sids,
                                self.mac.phy.frame_overhead)
        for rec in records:
            self.mac.submit(rec)
