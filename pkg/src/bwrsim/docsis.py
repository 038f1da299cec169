"""DOCSIS upstream MAC: CMTS MAP scheduler and cable modems.

The CMTS builds one MAP per ``map_interval``.  Each MAP covers the minislot
range starting ``map_lookahead`` after its build time and is delivered to the
modems ``ds_delay`` later.  Within a MAP, UGS grants go first, then RTPS
polls, then pending requests by (priority, arrival).  Whatever is left is
contention request space.

The scheduler has no notion of BWR: requests arriving through the BWR API
are ordinary :class:`ReqRecord` objects that happen to carry a non-zero
``earliest_grant_time``.
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .sim_core import Engine

CONTENTION = "CONTENTION"
POLL = "RTPS-POLL"


class DocsisConfigError(ValueError):
    pass


class FlowKind(str, Enum):
    BE = "BE"
    RTPS = "RTPS"
    UGS = "UGS"


class ReqOrigin(str, Enum):
    CONTENTION = "CONTENTION"
    PIGGYBACK = "PIGGYBACK"
    RTPS = "RTPS"
    BWR_API = "BWR-API"


@dataclass
class PhyConfig:
    symbol_rate: int = 1_280_000
    bits_per_symbol: int = 6
    minislot_symbols: int = 8
    map_interval: int = 2000
    ds_delay: int = 1000
    cm_processing: int = 500
    map_lookahead: Optional[int] = None     # default map_interval + ds_delay + cm_processing
    req_processing: int = 1500              # REQ arrival to first MAP build that may grant it
    frame_overhead: int = 16
    req_minislots: int = 1

    def __post_init__(self):
        if self.map_lookahead is None:
            self.map_lookahead = self.map_interval + self.ds_delay + self.cm_processing
        self.validate()

    def validate(self) -> None:
        if self.symbol_rate <= 0 or self.bits_per_symbol <= 0 or self.minislot_symbols <= 0:
            raise DocsisConfigError("PHY rates must be positive")
        if (self.minislot_symbols * 10**9) % self.symbol_rate:
            raise DocsisConfigError(
                f"minislot duration is not a whole number of ns "
                f"({self.minislot_symbols} symbols at {self.symbol_rate} sym/s)")
        if (self.map_interval * 1000) % self.minislot_ns:
            raise DocsisConfigError(
                f"map_interval ({self.map_interval} us) is not a multiple of the "
                f"minislot duration ({self.minislot_ns} ns)")
        if self.map_lookahead < self.ds_delay:
            raise DocsisConfigError("map_lookahead must cover the downstream delay")

    @property
    def raw_bps(self) -> int:
        return self.symbol_rate * self.bits_per_symbol

    @property
    def minislot_ns(self) -> int:
        return self.minislot_symbols * 10**9 // self.symbol_rate

    @property
    def minislot_bytes(self) -> int:
        return self.minislot_symbols * self.bits_per_symbol // 8

    @property
    def slots_per_map(self) -> int:
        return self.map_interval * 1000 // self.minislot_ns

    def slot_time(self, slot: int) -> int:
        """Start time of a minislot in whole microseconds."""
        return slot * self.minislot_ns // 1000

    def slot_at_or_after(self, t: int) -> int:
        return -(-(t * 1000) // self.minislot_ns)

    def slots_for(self, nbytes: int) -> int:
        return -(-nbytes // self.minislot_bytes)


@dataclass
class ServiceFlow:
    sid: int
    kind: FlowKind
    owner_cm: int
    priority: int = 0
    # UGS
    grant_interval: int = 4000
    grants_per_interval: int = 2
    grant_size_bytes: int = 90
    jitter_bound: int = 500
    phase: int = 0
    # RTPS
    poll_interval: int = 2000
    # BE
    backoff_start_exp: int = 2
    backoff_end_exp: int = 8

    @property
    def ugs_spacing(self) -> int:
        return self.grant_interval // self.grants_per_interval

    def validate(self) -> None:
        if self.kind == FlowKind.UGS:
            if self.grants_per_interval < 1 or self.grant_interval <= 0:
                raise DocsisConfigError(f"UGS flow {self.sid}: bad grant interval")
            if self.grant_interval % self.grants_per_interval:
                raise DocsisConfigError(
                    f"UGS flow {self.sid}: grant_interval {self.grant_interval} not divisible "
                    f"by grants_per_interval {self.grants_per_interval}")
            if self.grant_size_bytes <= 0:
                raise DocsisConfigError(f"UGS flow {self.sid}: grant size must be positive")
        elif self.kind == FlowKind.BE:
            if not 0 <= self.backoff_start_exp <= self.backoff_end_exp <= 15:
                raise DocsisConfigError(f"BE flow {self.sid}: bad backoff exponents")
        elif self.kind == FlowKind.RTPS:
            if self.poll_interval <= 0:
                raise DocsisConfigError(f"RTPS flow {self.sid}: poll interval must be positive")


class ReqRecord:
    __slots__ = ("sid", "bytes", "arrival", "earliest_grant_time", "origin", "seq",
                 "priority", "tx_time", "remaining", "done_at", "first_grant_start")

    def __init__(self, sid: int, nbytes: int, arrival: int, origin: ReqOrigin,
                 earliest_grant_time: int = 0, tx_time: Optional[int] = None):
        if earliest_grant_time and origin != ReqOrigin.BWR_API:
            raise ValueError("only BWR-API requests carry an earliest grant time")
        self.sid = sid
        self.bytes = nbytes
        self.arrival = arrival
        self.earliest_grant_time = earliest_grant_time
        self.origin = origin
        self.seq = 0
        self.priority = 0
        self.tx_time = arrival if tx_time is None else tx_time
        self.remaining = nbytes
        self.done_at: Optional[int] = None
        self.first_grant_start: Optional[int] = None

    def __repr__(self) -> str:
        return (f"ReqRecord(sid={self.sid}, bytes={self.bytes}, arrival={self.arrival}, "
                f"earliest={self.earliest_grant_time}, origin={self.origin.value})")


class MapElement:
    __slots__ = ("sid", "start", "count", "granted_bytes", "origin", "record", "used_bytes")

    def __init__(self, sid, start: int, count: int, granted_bytes: int = 0,
                 origin: Optional[str] = None, record: Optional[ReqRecord] = None):
        self.sid = sid          # int SID, CONTENTION or POLL
        self.start = start
        self.count = count
        self.granted_bytes = granted_bytes
        self.origin = origin
        self.record = record
        self.used_bytes = 0

    @property
    def end(self) -> int:
        return self.start + self.count

    def __repr__(self) -> str:
        return (f"MapElement(sid={self.sid}, start={self.start}, count={self.count}, "
                f"bytes={self.granted_bytes}, origin={self.origin})")


@dataclass
class MapMessage:
    map_id: int
    built_at: int
    start: int
    end: int
    elements: list = field(default_factory=list)
    contention: list = field(default_factory=list)   # (start, end) slot ranges

    def tiles(self) -> bool:
        """True if the elements exactly cover [start, end) without overlap."""
        pos = self.start
        for el in self.elements:
            if el.start != pos or el.count <= 0:
                return False
            pos = el.end
        return pos == self.end

    @property
    def contention_slots(self) -> int:
        return sum(b - a for a, b in self.contention)


def earliest_start_slot(rec: ReqRecord, start: int, end: int, phy: PhyConfig,
                        jit_guard: int = 0) -> Optional[int]:
    """First minislot of the MAP window [start, end) a request may use, or None to defer."""
    if not rec.earliest_grant_time:
        return start
    t = rec.earliest_grant_time + jit_guard
    if t >= phy.slot_time(end):
        return None
    return max(start, phy.slot_at_or_after(t))


class _FreeList:
    """Free minislot intervals of a MAP under construction."""

    def __init__(self, start: int, end: int):
        self.spans = [[start, end]]

    def take(self, lo: int, count: int, exact: bool = False) -> Optional[tuple[int, int]]:
        """First free run at or after ``lo``; returns (start, length <= count)."""
        for i, (a, b) in enumerate(self.spans):
            s = max(a, lo)
            if s >= b:
                continue
            if exact and s != lo:
                return None
            n = min(count, b - s)
            pieces = []
            if a < s:
                pieces.append([a, s])
            if s + n < b:
                pieces.append([s + n, b])
            self.spans[i:i + 1] = pieces
            return s, n
        return None

    def has_space_after(self, lo: int) -> bool:
        return any(b > max(a, lo) for a, b in self.spans)


class _FlowState:
    __slots__ = ("flow", "queue", "queued", "outstanding", "known", "contending",
                 "exp", "offered", "delivered", "waiting_map", "skip", "seek_lo")

    def __init__(self, flow: ServiceFlow):
        self.flow = flow
        self.queue: deque = deque()     # [tag, remaining wire bytes, wire size]
        self.queued = 0
        self.outstanding = 0            # requested and not yet seen in a MAP
        self.known = 0                  # granted in delivered MAPs, not yet used
        self.contending = False
        self.exp = flow.backoff_start_exp
        self.offered = 0
        self.delivered = 0
        self.waiting_map = False
        self.skip = 0
        self.seek_lo = 0

    @property
    def need(self) -> int:
        return self.queued - self.outstanding - self.known


@dataclass
class MacCounters:
    maps: int = 0
    total_slots: int = 0
    contention_slots: int = 0
    granted_slots: int = 0
    req_attempts: int = 0
    req_success: int = 0
    req_collisions: int = 0
    piggyback_reqs: int = 0
    jit_granted_bytes: int = 0
    jit_wasted_bytes: int = 0
    ugs_granted_bytes: int = 0
    ugs_slack_bytes: int = 0
    be_granted_bytes: int = 0
    be_wasted_bytes: int = 0
    delivered_bytes: int = 0
    early_grant_violations: int = 0
    ugs_jitter_violations: int = 0
    tiling_errors: int = 0


class DocsisMac:
    """CMTS scheduler plus all cable modems sharing one upstream channel."""

    def __init__(self, engine: Engine, phy: PhyConfig, piggyback: bool = True,
                 jit_guard: int = 0, map_log: bool = False):
        self.engine = engine
        self.phy = phy
        self.piggyback = piggyback
        self.jit_guard = jit_guard
        self.flows: dict[int, ServiceFlow] = {}
        self._state: dict[int, _FlowState] = {}
        self._pending: list[ReqRecord] = []
        self._req_seq = itertools.count()
        self._map_seq = itertools.count()
        self._next_slot = phy.slot_at_or_after(phy.map_lookahead)
        self._delivered: deque[MapMessage] = deque()
        self._contention_tx: dict[int, list] = {}
        self._waiting: list[_FlowState] = []
        self._retry: list[_FlowState] = []
        self._backoff = engine.rng("backoff")
        self._ugs_next: dict[int, int] = {}
        self._ugs_last_start: dict[int, int] = {}
        self.ugs_gaps: dict[int, list] = {}
        self.ugs_payload: dict[int, deque] = {}
        self.counters = MacCounters()
        self.req_log: list[ReqRecord] = []
        self.map_log_enabled = map_log
        self.map_log: list[str] = []
        self._waste_mark = 0
        self.on_cmts_egress: Optional[Callable] = None
        self.on_ugs_payload: Optional[Callable] = None
        self.on_grant: list[Callable[[MapElement, int], None]] = []
        self._started = False

    # -- configuration ---------------------------------------------------------
    def add_flow(self, flow: ServiceFlow) -> None:
        flow.validate()
        if flow.sid in self.flows:
            raise DocsisConfigError(f"duplicate SID {flow.sid}")
        self.flows[flow.sid] = flow
        self._state[flow.sid] = _FlowState(flow)
        if flow.kind == FlowKind.UGS:
            self._ugs_next[flow.sid] = flow.phase
            self.ugs_gaps[flow.sid] = []
            self.ugs_payload[flow.sid] = deque()

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self.engine.schedule(0, "cmts", "build_map", self._on_build)

    def flow_state(self, sid: int) -> _FlowState:
        return self._state[sid]

    # -- CMTS ------------------------------------------------------------------
    def submit(self, record: ReqRecord) -> None:
        """Hand a request to the scheduler (contention, piggyback, poll or API)."""
        if record.bytes <= 0:
            return
        flow = self.flows.get(record.sid)
        if flow is None:
            raise DocsisConfigError(f"request for unknown SID {record.sid}")
        record.seq = next(self._req_seq)
        record.priority = flow.priority
        self._pending.append(record)
        self.req_log.append(record)

    def _on_build(self) -> None:
        m = self.build_map(self.engine.now)
        self.engine.after(self.phy.ds_delay, "cm", "map_rx", self._on_map_rx, m)
        self.engine.after(self.phy.map_interval, "cmts", "build_map", self._on_build)

    def ugs_tick(self, flow: ServiceFlow, t0: int, t1: int) -> list[int]:
        """Nominal UGS grant start times falling in [t0, t1)."""
        out = []
        t = self._ugs_next[flow.sid]
        while t < t0:
            t += flow.ugs_spacing
        while t < t1:
            out.append(t)
            t += flow.ugs_spacing
        self._ugs_next[flow.sid] = t
        return out

    def build_map(self, now: int) -> MapMessage:
        phy = self.phy
        start = self._next_slot
        end = start + phy.slots_per_map
        self._next_slot = end
        t0, t1 = phy.slot_time(start), phy.slot_time(end)
        m = MapMessage(next(self._map_seq), now, start, end)
        free = _FreeList(start, end)
        grants: list[MapElement] = []
        mb = phy.minislot_bytes

        for flow in self.flows.values():
            if flow.kind != FlowKind.UGS:
                continue
            n = phy.slots_for(flow.grant_size_bytes)
            for nominal in self.ugs_tick(flow, t0, t1):
                lo = phy.slot_at_or_after(nominal)
                got = free.take(lo, n, exact=True)
                if got is None or got[1] < n:
                    got = self._place_whole(free, lo, n)
                if got is None:
                    self.counters.ugs_jitter_violations += 1
                    continue
                s, _ = got
                if abs(phy.slot_time(s) - nominal) > flow.jitter_bound:
                    self.counters.ugs_jitter_violations += 1
                el = MapElement(flow.sid, s, n, flow.grant_size_bytes, "UGS")
                grants.append(el)
                last = self._ugs_last_start.get(flow.sid)
                if last is not None:
                    self.ugs_gaps[flow.sid].append(phy.slot_time(s) - last)
                self._ugs_last_start[flow.sid] = phy.slot_time(s)

        for flow in self.flows.values():
            if flow.kind != FlowKind.RTPS:
                continue
            t = flow.phase
            if t < t0:
                t += -(-(t0 - t) // flow.poll_interval) * flow.poll_interval
            while t < t1:
                got = free.take(phy.slot_at_or_after(t), phy.req_minislots)
                if got is not None:
                    grants.append(MapElement(POLL, got[0], got[1], 0, flow.sid))
                t += flow.poll_interval

        if self._pending:
            self._pending.sort(key=lambda r: (-r.priority, r.arrival, r.seq))
            keep = []
            for rec in self._pending:
                if rec.arrival + phy.req_processing > now or not free.spans:
                    keep.append(rec)
                    continue
                lo = earliest_start_slot(rec, start, end, phy, self.jit_guard)
                if lo is None:
                    keep.append(rec)
                    continue
                while rec.remaining > 0:
                    got = free.take(lo, phy.slots_for(rec.remaining))
                    if got is None:
                        break
                    s, n = got
                    nbytes = min(rec.remaining, n * mb)
                    rec.remaining -= nbytes
                    grants.append(MapElement(rec.sid, s, n, nbytes, rec.origin.value, rec))
                    if rec.first_grant_start is None:
                        rec.first_grant_start = phy.slot_time(s)
                    if rec.remaining == 0:
                        rec.done_at = phy.slot_time(s + n)
                if rec.remaining > 0:
                    keep.append(rec)
            self._pending = keep

        grants.sort(key=lambda el: el.start)
        pos = start
        for el in grants:
            if el.start > pos:
                m.elements.append(MapElement(CONTENTION, pos, el.start - pos))
                m.contention.append((pos, el.start))
            m.elements.append(el)
            pos = el.end
        if pos < end:
            m.elements.append(MapElement(CONTENTION, pos, end - pos))
            m.contention.append((pos, end))

        c = self.counters
        if not m.tiles():
            c.tiling_errors += 1
        c.maps += 1
        c.total_slots += end - start
        cs = m.contention_slots
        c.contention_slots += cs
        c.granted_slots += end - start - cs
        for el in grants:
            if el.sid == POLL:
                self.engine.schedule(phy.slot_time(el.start), "cm", "poll", self._on_poll, el)
                continue
            if el.origin == ReqOrigin.BWR_API.value:
                c.jit_granted_bytes += el.granted_bytes
                if phy.slot_time(el.start) < el.record.earliest_grant_time + self.jit_guard:
                    c.early_grant_violations += 1
            elif el.origin == "UGS":
                c.ugs_granted_bytes += el.granted_bytes
            else:
                c.be_granted_bytes += el.granted_bytes
            self.engine.schedule(phy.slot_time(el.start), "cm", "grant", self.cm_transmit, el)
        if self.map_log_enabled:
            wasted = c.jit_wasted_bytes + c.be_wasted_bytes
            n_grants = sum(1 for el in grants if el.sid != POLL)
            self.map_log.append(
                f"{m.map_id}\t{t0}\t{n_grants}\t{cs}\t{wasted - self._waste_mark}")
            self._waste_mark = wasted
        return m

    @staticmethod
    def _place_whole(free: _FreeList, lo: int, n: int) -> Optional[tuple[int, int]]:
        for a, b in free.spans:
            s = max(a, lo)
            if b - s >= n:
                return free.take(s, n, exact=True)
        return None

    # -- cable modems ------------------------------------------------------------
    def _on_map_rx(self, m: MapMessage) -> None:
        now = self.engine.now
        phy = self.phy
        while self._delivered and phy.slot_time(self._delivered[0].end) <= now:
            self._delivered.popleft()
        self._delivered.append(m)
        for el in m.elements:
            if isinstance(el.sid, int) and el.sid in self._state:
                st = self._state[el.sid]
                if st.flow.kind == FlowKind.UGS:
                    continue
                st.known += el.granted_bytes
                st.outstanding = max(0, st.outstanding - el.granted_bytes)
        retry, self._retry = self._retry, []
        for st in retry:
            st.contending = False
            self._new_backoff(st, grow=True)
        waiting, self._waiting = self._waiting, []
        for st in waiting:
            st.waiting_map = False
            self._seek_contention(st)

    def cm_on_data(self, sid: int, nbytes: int, tag=None) -> None:
        """Queue a frame on a BE flow; ``tag`` is a Packet to stamp, or None."""
        st = self._state.get(sid)
        if st is None:
            raise DocsisConfigError(f"unknown SID {sid}")
        if st.flow.kind == FlowKind.UGS:
            raise DocsisConfigError(f"SID {sid} is UGS; data rides BE flows")
        wire = nbytes + self.phy.frame_overhead
        if tag is not None:
            tag.cm_ingress = self.engine.now
        st.queue.append([tag, wire, wire])
        st.queued += wire
        st.offered += wire
        self._maybe_request(st)

    def _maybe_request(self, st: _FlowState) -> None:
        if st.contending or st.flow.kind != FlowKind.BE:
            return
        if st.need > 0 and st.outstanding == 0 and st.known == 0:
            st.contending = True
            st.exp = st.flow.backoff_start_exp
            self._new_backoff(st, grow=False)

    def _new_backoff(self, st: _FlowState, grow: bool) -> None:
        if st.need <= 0:
            st.contending = False
            return
        if grow:
            st.exp = min(st.exp + 1, st.flow.backoff_end_exp)
        st.contending = True
        st.skip = self._backoff.uniform_int(0, (1 << st.exp) - 1)
        st.seek_lo = 0
        self._seek_contention(st)

    def _seek_contention(self, st: _FlowState) -> None:
        phy = self.phy
        lo = max(phy.slot_at_or_after(self.engine.now + 1), st.seek_lo)
        skip = st.skip
        for m in self._delivered:
            if m.end <= lo:
                continue
            for a, b in m.contention:
                a = max(a, lo)
                if a >= b:
                    continue
                if skip < b - a:
                    slot = a + skip
                    st.skip = 0
                    self._register_req(st, slot)
                    return
                skip -= b - a
        st.skip = skip
        # slots up to here are already counted
        if self._delivered:
            st.seek_lo = max(lo, self._delivered[-1].end)
        st.waiting_map = True
        self._waiting.append(st)

    def _register_req(self, st: _FlowState, slot: int) -> None:
        self.counters.req_attempts += 1
        txs = self._contention_tx.get(slot)
        if txs is None:
            txs = self._contention_tx[slot] = []
            end = self.phy.slot_time(slot + self.phy.req_minislots)
            self.engine.schedule(end, "channel", "req_slot", self._resolve_slot, slot)
        txs.append(st)

    def _resolve_slot(self, slot: int) -> None:
        txs = self._contention_tx.pop(slot)
        now = self.engine.now
        if len(txs) == 1:
            st = txs[0]
            st.contending = False
            st.exp = st.flow.backoff_start_exp
            need = st.need
            if need > 0:
                self.counters.req_success += 1
                st.outstanding += need
                self.submit(ReqRecord(st.flow.sid, need, now, ReqOrigin.CONTENTION,
                                      tx_time=self.phy.slot_time(slot)))
            return
        self.counters.req_collisions += len(txs)
        # collision is inferred from the absence of a grant in the next delivered MAP
        self._retry.extend(txs)

    def _on_poll(self, el: MapElement) -> None:
        st = self._state[el.origin]
        need = st.need
        if need > 0:
            st.outstanding += need
            t_end = self.phy.slot_time(el.end)
            self.submit(ReqRecord(st.flow.sid, need, t_end, ReqOrigin.RTPS,
                                  tx_time=self.phy.slot_time(el.start)))

    def cm_transmit(self, el: MapElement) -> None:
        """Use one grant: dequeue FIFO, deliver at grant end, piggyback the rest."""
        st = self._state[el.sid]
        phy = self.phy
        t_end = phy.slot_time(el.end)
        c = self.counters
        for cb in self.on_grant:
            cb(el, self.engine.now)
        if st.flow.kind == FlowKind.UGS:
            q = self.ugs_payload[el.sid]
            if q and q[0][1] <= el.granted_bytes:
                payload, size = q.popleft()
                el.used_bytes = size
                c.ugs_slack_bytes += el.granted_bytes - size
                if self.on_ugs_payload is not None:
                    self.engine.schedule(t_end, "cmts", "ugs_rx", self.on_ugs_payload,
                                         payload, size)
            else:
                c.ugs_slack_bytes += el.granted_bytes
            return
        st.known = max(0, st.known - el.granted_bytes)
        room = el.granted_bytes
        done = []
        q = st.queue
        while room and q:
            head = q[0]
            if head[0] is not None and head[1] == head[2]:
                head[0].cm_tx_start = self.engine.now
            take = min(room, head[1])
            head[1] -= take
            room -= take
            if head[1] == 0:
                q.popleft()
                st.delivered += head[2]
                if head[0] is not None:
                    done.append(head[0])
        sent = el.granted_bytes - room
        el.used_bytes = sent
        st.queued -= sent
        c.delivered_bytes += sent
        if room:
            if el.origin == ReqOrigin.BWR_API.value:
                c.jit_wasted_bytes += room
            else:
                c.be_wasted_bytes += room
        if done:
            for pkt in done:
                pkt.cmts_egress = t_end
            if self.on_cmts_egress is not None:
                self.engine.schedule(t_end, "cmts", "egress", self.on_cmts_egress, done)
        need = st.need
        if need > 0 and st.flow.kind == FlowKind.BE:
            if self.piggyback:
                if st.contending:
                    # piggyback supersedes a contention attempt still looking for a slot
                    self._abandon_contention(st)
                c.piggyback_reqs += 1
                st.outstanding += need
                self.submit(ReqRecord(st.flow.sid, need, t_end, ReqOrigin.PIGGYBACK,
                                      tx_time=phy.slot_time(el.start)))
            else:
                self._maybe_request(st)

    def _abandon_contention(self, st: _FlowState) -> None:
        st.contending = False
        st.waiting_map = False
        if st in self._waiting:
            self._waiting.remove(st)
        if st in self._retry:
            self._retry.remove(st)

    def queue_ugs_payload(self, sid: int, payload, size: int) -> None:
        self.ugs_payload[sid].append((payload, size))

    # -- derived numbers ----------------------------------------------------------
    @property
    def contention_fraction(self) -> float:
        c = self.counters
        return c.contention_slots / c.total_slots if c.total_slots else 0.0
