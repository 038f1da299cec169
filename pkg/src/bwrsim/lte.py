"""LTE uplink request-grant-data loop between UEs and an eNB.

The UE waits for its next SR opportunity, the eNB hands out a BSR grant,
the BSR is processed and data grants are issued per subframe.  Every hop of
the loop is ``pipeline_hop`` subframes.  HARQ is a per-transport-block
Bernoulli failure with a fixed retransmission turnaround.

eNB subframe boundaries sit ``sr_floor`` after the UE's SR grid, which is
where the fixed part of the SR waiting time goes.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .packet import Packet
from .sim_core import Engine

N_LCG = 4


class LteConfigError(ValueError):
    pass


@dataclass
class LteConfig:
    sr_period: int = 5000
    subframe: int = 1000
    pipeline_hop: int = 4            # subframes
    sr_floor: int = 500
    decode_delay: int = 2000
    decode_jitter: int = 500         # per-block decode ~ U[delay - jitter, delay + jitter]
    prb_count: int = 25
    bytes_per_prb: int = 64
    bler: float = 0.0
    harq_rtt: int = 8000
    air_overhead: int = 0
    dl_delay: int = 1000             # fixed LTE downlink for the echo path
    # announce the latest decode finish rather than the nominal one
    report_worst_case_decode: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.subframe <= 0:
            raise LteConfigError("subframe must be positive")
        if self.sr_period <= 0 or self.sr_period % self.subframe:
            raise LteConfigError(
                f"sr_period ({self.sr_period} us) must be a positive multiple of "
                f"subframe ({self.subframe} us)")
        if not 0.0 <= self.bler <= 1.0:
            raise LteConfigError(f"bler must lie in [0, 1], got {self.bler}")
        if self.pipeline_hop < 1:
            raise LteConfigError("pipeline_hop must be at least one subframe")
        if self.decode_jitter < 0 or self.decode_jitter > self.decode_delay:
            raise LteConfigError("decode_jitter must lie in [0, decode_delay]")
        if self.bler >= 1.0:
            raise LteConfigError("bler = 1 never delivers a transport block")

    @property
    def hop_us(self) -> int:
        return self.pipeline_hop * self.subframe

    @property
    def subframe_capacity(self) -> int:
        return self.prb_count * self.bytes_per_prb

    @property
    def decode_min(self) -> int:
        return self.decode_delay - self.decode_jitter

    @property
    def decode_max(self) -> int:
        return self.decode_delay + self.decode_jitter


def min_max_uplink_latency(cfg: LteConfig) -> tuple[int, int]:
    """Analytic bounds on UE-data to eNB-egress latency with HARQ off.

    SR wait spans ``sr_floor`` to ``sr_period + sr_floor``, then four
    pipeline hops, then decoding.
    """
    hops = 4 * cfg.hop_us
    lo = cfg.sr_floor + hops + cfg.decode_min + cfg.air_overhead
    hi = cfg.sr_period + cfg.sr_floor + hops + cfg.decode_max + cfg.air_overhead
    return lo, hi


@dataclass
class UlGrant:
    ue_id: int
    decision_subframe: int
    tx_subframe: int
    bytes: int
    lcg_split: tuple[int, int, int, int]


@dataclass(frozen=True)
class GrantNotification:
    """What the eNB MAC tells the BWR generator at decision time."""
    decision_time: int
    tx_subframe: int
    total_bytes: int
    lcg_split: tuple[int, int, int, int]
    expected_cm_arrival: int
    ue_id: int = 0


@dataclass
class UeState:
    ue_id: int
    lcg_queues: list = field(default_factory=lambda: [deque() for _ in range(N_LCG)])
    lcg_bytes: list = field(default_factory=lambda: [0] * N_LCG)
    unreported: list = field(default_factory=lambda: [0] * N_LCG)
    sr_pending: bool = False
    bsr_pending: bool = False
    active_grants: list = field(default_factory=list)
    # packets awaiting in-order release at the eNB
    reorder: deque = field(default_factory=deque)
    last_release: int = 0

    @property
    def buffer_bytes(self) -> int:
        return sum(self.lcg_bytes)


class _Inflight:
    """Reassembly state of one packet at the eNB."""
    __slots__ = ("packet", "remaining", "done_at")

    def __init__(self, packet: Packet):
        self.packet = packet
        self.remaining = packet.size
        self.done_at: Optional[int] = None


class LteUplink:
    """UEs plus the eNB MAC scheduler, driven by engine events."""

    def __init__(self, engine: Engine, cfg: LteConfig, n_ue: int = 1,
                 on_egress: Optional[Callable[[Packet, int], None]] = None):
        self.engine = engine
        self.cfg = cfg
        self.ues = {i: UeState(i) for i in range(n_ue)}
        self.on_egress = on_egress
        self.grant_listeners: list[Callable[[GrantNotification], None]] = []
        # eNB view: reported bytes per UE per LCG, split by eligibility time
        self._reported: dict[int, deque] = {i: deque() for i in self.ues}
        self._tick_event = None
        self._rr = 0
        self._bler = engine.rng("bler")
        self._decode = engine.rng("decode")
        self._inflight: dict[int, _Inflight] = {}
        self.grants: list[UlGrant] = []
        self.bytes_in = 0
        self.bytes_out = 0
        self.harq_retx = 0
        self.blocks = 0

    # -- time grid -----------------------------------------------------
    def subframe_time(self, k: int) -> int:
        return k * self.cfg.subframe + self.cfg.sr_floor

    def subframe_at_or_after(self, t: int) -> int:
        sf = self.cfg.subframe
        return -(-(t - self.cfg.sr_floor) // sf)

    def next_sr_opportunity(self, t: int) -> int:
        p = self.cfg.sr_period
        return -(-t // p) * p

    # -- UE side ---------------------------------------------------------
    def on_ue_data(self, ue_id: int, packet: Packet, lcg: int = 0,
                   at: Optional[int] = None) -> None:
        ue = self.ues.get(ue_id)
        if ue is None:
            raise LteConfigError(f"unknown UE {ue_id}")
        if packet.size <= 0:
            raise ValueError("packet size must be positive")
        if not 0 <= lcg < N_LCG:
            raise ValueError(f"lcg must be in 0..3, got {lcg}")
        now = self.engine.now if at is None else at
        packet.ue_ingress = now
        packet.lcg = lcg
        ue.lcg_queues[lcg].append([packet, packet.size])
        ue.lcg_bytes[lcg] += packet.size
        ue.unreported[lcg] += packet.size
        ue.reorder.append(self._track(packet))
        self.bytes_in += packet.size
        if self._needs_sr(ue):
            ue.sr_pending = True
            t_sr = self.next_sr_opportunity(now)
            self.engine.schedule(t_sr, "lte", "sr", self._sr, ue)

    def _track(self, packet: Packet) -> _Inflight:
        rec = _Inflight(packet)
        self._inflight[id(packet)] = rec
        return rec

    def _needs_sr(self, ue: UeState) -> bool:
        if ue.sr_pending or ue.bsr_pending or ue.active_grants:
            return False
        return not any(b for _, b in self._reported_entries(ue.ue_id))

    def _reported_entries(self, ue_id: int):
        for entry in self._reported[ue_id]:
            yield entry[0], sum(entry[1])

    def _sr(self, ue: UeState) -> None:
        # SR seen by the eNB after sr_floor; BSR grant one hop later; UE sends BSR one hop after that
        ue.sr_pending = False
        ue.bsr_pending = True
        t_bsr = self.engine.now + self.cfg.sr_floor + 2 * self.cfg.hop_us
        self.engine.schedule(t_bsr, "lte", "bsr", self._bsr, ue)

    def _bsr(self, ue: UeState) -> None:
        ue.bsr_pending = False
        self._report(ue, self.engine.now)

    def _report(self, ue: UeState, at: int) -> None:
        split = tuple(ue.unreported)
        if not any(split):
            return
        ue.unreported = [0] * N_LCG
        eligible = at + self.cfg.hop_us
        self._reported[ue.ue_id].append([eligible, list(split)])
        self._ensure_tick(eligible)

    # -- eNB scheduler -----------------------------------------------------
    def _ensure_tick(self, t: int) -> None:
        k = self.subframe_at_or_after(max(t, self.engine.now))
        when = self.subframe_time(k)
        ev = self._tick_event
        if ev is not None and not ev.cancelled and ev.fire_at <= when:
            return
        if ev is not None:
            ev.cancel()
        self._tick_event = self.engine.schedule(when, "enb", "subframe", self._tick, k)

    def _tick(self, k: int) -> None:
        self._tick_event = None
        self.enb_schedule_subframe(k)
        # keep ticking while any reported bytes remain
        nxt = None
        for q in self._reported.values():
            for eligible, split in q:
                if any(split):
                    nxt = eligible if nxt is None else min(nxt, eligible)
        if nxt is not None:
            self._ensure_tick(max(nxt, self.subframe_time(k + 1)))

    def enb_schedule_subframe(self, now_subframe: int) -> list[UlGrant]:
        """Allocate one subframe's capacity: strict LCG priority, then round-robin."""
        now = self.subframe_time(now_subframe)
        capacity = self.cfg.subframe_capacity
        ue_ids = sorted(self.ues)
        if not ue_ids:
            return []
        start = self._rr % len(ue_ids)
        order = ue_ids[start:] + ue_ids[:start]
        self._rr += 1
        splits: dict[int, list[int]] = {}
        for lcg in range(N_LCG):
            for ue_id in order:
                if capacity <= 0:
                    break
                for entry in self._reported[ue_id]:
                    if entry[0] > now or capacity <= 0:
                        continue
                    take = min(entry[1][lcg], capacity)
                    if take:
                        entry[1][lcg] -= take
                        capacity -= take
                        splits.setdefault(ue_id, [0] * N_LCG)[lcg] += take
        grants = []
        for ue_id in ue_ids:
            q = self._reported[ue_id]
            while q and not any(q[0][1]):
                q.popleft()
            if ue_id not in splits:
                continue
            split = tuple(splits[ue_id])
            grant = UlGrant(ue_id, now_subframe, now_subframe + self.cfg.pipeline_hop,
                            sum(split), split)
            grants.append(grant)
            self.grants.append(grant)
            ue = self.ues[ue_id]
            ue.active_grants.append(grant)
            tx_time = self.subframe_time(grant.tx_subframe)
            self.engine.schedule(tx_time, "lte", "ul_tx", self.ul_transmit, grant)
            note = GrantNotification(
                decision_time=now,
                tx_subframe=grant.tx_subframe,
                total_bytes=grant.bytes,
                lcg_split=split,
                expected_cm_arrival=self.expected_arrival(tx_time),
                ue_id=ue_id,
            )
            for listener in self.grant_listeners:
                listener(note)
        return grants

    def expected_arrival(self, tx_time: int) -> int:
        cfg = self.cfg
        decode = cfg.decode_max if cfg.report_worst_case_decode else cfg.decode_delay
        return tx_time + decode + cfg.air_overhead

    # -- air interface ---------------------------------------------------------
    def ul_transmit(self, grant: UlGrant) -> None:
        ue = self.ues[grant.ue_id]
        ue.active_grants.remove(grant)
        block = []
        for lcg in range(N_LCG):
            want = grant.lcg_split[lcg]
            q = ue.lcg_queues[lcg]
            while want and q:
                seg = q[0]
                take = min(want, seg[1])
                seg[1] -= take
                want -= take
                ue.lcg_bytes[lcg] -= take
                block.append((seg[0], take))
                if seg[1] == 0:
                    q.popleft()
        # piggyback BSR for anything not yet reported
        self._report(ue, self.engine.now)
        self.blocks += 1
        self._attempt(block)

    def _attempt(self, block) -> None:
        if self._bler.bernoulli(self.cfg.bler):
            self.harq_retx += 1
            self.engine.after(self.cfg.harq_rtt, "lte", "harq_retx", self._attempt, block)
            return
        cfg = self.cfg
        decode = self._decode.uniform_int(cfg.decode_min, cfg.decode_max)
        done = self.engine.now + decode + cfg.air_overhead
        self.engine.schedule(done, "enb", "decoded", self._decoded, block)

    def _decoded(self, block) -> None:
        now = self.engine.now
        for packet, nbytes in block:
            rec = self._inflight[id(packet)]
            rec.remaining -= nbytes
            if rec.remaining == 0:
                rec.done_at = now
        for ue in self.ues.values():
            self._release(ue, now)

    def _release(self, ue: UeState, now: int) -> None:
        # in-order delivery after reassembly
        while ue.reorder and ue.reorder[0].done_at is not None:
            rec = ue.reorder.popleft()
            del self._inflight[id(rec.packet)]
            pkt = rec.packet
            pkt.enb_egress = now
            ue.last_release = now
            self.bytes_out += pkt.size
            if self.on_egress is not None:
                self.on_egress(pkt, now)
