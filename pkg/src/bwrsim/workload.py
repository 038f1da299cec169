"""Ping experiment over the LTE + DOCSIS chain, background load, and latency statistics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bwr import BwrApi, BwrGenerator, BwrMode, BwrTransport
from .config import ScenarioConfig
from .docsis import DocsisMac, FlowKind, ServiceFlow
from .lte import LteUplink
from .packet import Packet
from .sim_core import US_PER_S, Engine

CM_UT = 0
UGS_SID = 1
DATA_SID = 2            # CM-UT data flows use SIDs 2..5 (one per LCG in PER_LCG mode)
BG_SID_BASE = 100

TRACE_HEADER = ["pkt_id", "payload", "ue_ingress_us", "enb_egress_us", "cmts_egress_us", "rtt_us"]
GAIN_HEADER = ["load", "runs", "baseline_rtt_ms", "bwr_rtt_ms", "baseline_docsis_ms",
               "bwr_docsis_ms", "gain"]


@dataclass
class SegmentStats:
    mean: float
    p50: float
    p95: float
    p99: float
    min: float
    max: float
    count: int

    @classmethod
    def of(cls, values_us) -> "SegmentStats":
        a = np.asarray(values_us, dtype=float)
        if a.size == 0:
            nan = float("nan")
            return cls(nan, nan, nan, nan, nan, nan, 0)
        p50, p95, p99 = np.percentile(a, [50, 95, 99])
        # everything reported in ms
        return cls(float(a.mean()) / 1e3, float(p50) / 1e3, float(p95) / 1e3,
                   float(p99) / 1e3, float(a.min()) / 1e3, float(a.max()) / 1e3, int(a.size))


@dataclass
class LatencyStats:
    count: int
    rtt: SegmentStats
    lte_uplink: SegmentStats
    docsis_upstream: SegmentStats
    docsis_segment: SegmentStats
    cm_wait: SegmentStats
    docsis_segment_mean: float
    wasted_grant_bytes: int
    jit_granted_bytes: int
    jit_wasted_bytes: int
    early_grant_violations: int
    bg_offered_bps: float
    bg_target_bps: float
    contention_fraction: float
    delivered_bps: float
    bwr_messages: int
    bwr_signaling_bps: float
    req_collisions: int
    events: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyStats":
        d = dict(d)
        for k in ("rtt", "lte_uplink", "docsis_upstream", "docsis_segment", "cm_wait"):
            d[k] = SegmentStats(**d[k])
        return cls(**d)


@dataclass
class RunResult:
    config: ScenarioConfig
    stats: LatencyStats
    packets: list
    engine: Engine
    mac: DocsisMac
    lte: LteUplink
    bwr: Optional[BwrGenerator] = None
    transport: Optional[BwrTransport] = None
    api: Optional[BwrApi] = None


def return_path_constant(cfg: ScenarioConfig) -> int:
    """CMTS egress to UE return, in microseconds: core round trip, DOCSIS and LTE downlink."""
    return 2 * cfg.core.delay + cfg.docsis.ds_delay + cfg.lte.dl_delay


def ping_sizes(cfg: ScenarioConfig) -> list[int]:
    p = cfg.ping
    return [pl + p.header_bytes for pl in range(p.payload_min, p.payload_max + 1, p.payload_step)]


def bg_packet_rate(cfg: ScenarioConfig) -> float:
    """Poisson rate (packets/s) per background flow that meets the wire target."""
    load = cfg.load
    if load.target_utilization <= 0 or load.cm_bg_count <= 0:
        return 0.0
    mean_wire = float(np.mean(load.packet_sizes)) + cfg.docsis.frame_overhead
    target_Bps = load.target_utilization * cfg.docsis.raw_bps / 8
    return target_Bps / mean_wire / (load.cm_bg_count * load.flows_per_cm)


class Scenario:
    """Wires the models for one run."""

    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.engine = Engine(cfg.run.seed, trace=cfg.run.trace)
        self.mac = DocsisMac(self.engine, cfg.docsis, piggyback=cfg.be.piggyback,
                             jit_guard=cfg.bwr.jit_guard, map_log=cfg.run.map_log)
        self.lte = LteUplink(self.engine, cfg.lte, n_ue=1, on_egress=self._lte_egress)
        self.packets: list[Packet] = []
        self.bwr = self.transport = self.api = None
        self.per_lcg = cfg.bwr.mode == "per_lcg"
        self._build_flows()
        if cfg.bwr.enabled:
            self._build_bwr()
        self.mac.on_cmts_egress = self._cmts_egress

    def _build_flows(self) -> None:
        cfg, mac = self.cfg, self.mac
        be = dict(backoff_start_exp=cfg.be.backoff_start_exp,
                  backoff_end_exp=cfg.be.backoff_end_exp)
        if cfg.ugs.enabled:
            u = cfg.ugs
            mac.add_flow(ServiceFlow(UGS_SID, FlowKind.UGS, CM_UT,
                                     grant_interval=u.grant_interval,
                                     grants_per_interval=u.grants_per_interval,
                                     grant_size_bytes=u.grant_size,
                                     jitter_bound=u.jitter_bound, phase=u.phase))
        n_data = 4 if self.per_lcg else 1
        for lcg in range(n_data):
            mac.add_flow(ServiceFlow(DATA_SID + lcg, FlowKind.BE, CM_UT,
                                     priority=(n_data - lcg) if self.per_lcg else 0, **be))
        load = cfg.load
        self.bg_sids = []
        for cm in range(1, load.cm_bg_count + 1):
            for k in range(load.flows_per_cm):
                sid = BG_SID_BASE + (cm - 1) * load.flows_per_cm + k
                mac.add_flow(ServiceFlow(sid, FlowKind.BE, cm, **be))
                self.bg_sids.append(sid)

    def _build_bwr(self) -> None:
        cfg = self.cfg
        mode = BwrMode.PER_LCG if self.per_lcg else BwrMode.BULK
        self.transport = BwrTransport(self.mac, UGS_SID)
        self.bwr = BwrGenerator(self.engine, cfg.bwr.period, cfg.lte.subframe, mode,
                                cfg.bwr.encoded_size, cfg.bwr.phase,
                                sink=self.transport.transport_bwr)
        self.lte.grant_listeners.append(self.bwr.on_grant)
        sids = [DATA_SID + i for i in range(4)] if self.per_lcg else [DATA_SID]
        self.api = BwrApi(self.mac, sids)
        self.transport.on_delivery = self.api.on_bwr

    # -- packet path --------------------------------------------------------------
    def _lte_egress(self, pkt: Packet, now: int) -> None:
        sid = DATA_SID + (pkt.lcg if self.per_lcg else 0)
        self.mac.cm_on_data(sid, pkt.size, pkt)

    def _cmts_egress(self, pkts) -> None:
        cfg = self.cfg
        for pkt in pkts:
            pkt.core_arrival = pkt.cmts_egress + cfg.core.delay
            pkt.core_departure = pkt.core_arrival
            pkt.ue_return = (pkt.core_departure + cfg.core.delay + cfg.docsis.ds_delay
                             + cfg.lte.dl_delay)

    def _start_pings(self) -> None:
        p = self.cfg.ping
        rng = self.engine.rng("workload")
        sizes = ping_sizes(self.cfg)
        t0 = rng.uniform_int(0, p.interval - 1)
        n = 0
        t = t0
        end = self.cfg.run.duration
        while t < end:
            size = sizes[n % len(sizes)]
            pkt = Packet(n, size - p.header_bytes, size, "ping", p.lcg)
            self.packets.append(pkt)
            at = t + rng.uniform_int(0, p.jitter)
            self.engine.schedule(at, "ue", "ping", self._send_ping, pkt)
            n += 1
            t += p.interval

    def _send_ping(self, pkt: Packet) -> None:
        self.lte.on_ue_data(0, pkt, pkt.lcg)

    def _start_background(self) -> None:
        rate = bg_packet_rate(self.cfg)
        if rate <= 0:
            return
        sizes = list(self.cfg.load.packet_sizes)
        self.bg_offered_bytes = 0
        for sid in self.bg_sids:
            rng = self.engine.rng(f"bg:{sid}")
            self._bg_next(sid, rng, rate, sizes, 0)

    def _bg_next(self, sid, rng, rate, sizes, now) -> None:
        gap = max(1, int(round(rng.expovariate(rate) * US_PER_S)))
        t = now + gap
        if t < self.cfg.run.duration:
            self.engine.schedule(t, "cm_bg", "arrival", self._bg_arrival, sid, rng, rate, sizes)

    def _bg_arrival(self, sid, rng, rate, sizes) -> None:
        size = rng.choice(sizes)
        self.mac.cm_on_data(sid, size)
        self._bg_next(sid, rng, rate, sizes, self.engine.now)

    def run(self) -> RunResult:
        cfg = self.cfg
        self.mac.start()
        if self.bwr is not None:
            self.bwr.start()
        if cfg.ping.enabled:
            self._start_pings()
        self._start_background()
        self.engine.run_until(cfg.run.duration + cfg.run.drain)
        if self.api is not None:
            self.api.state.waste_counter = self.mac.counters.jit_wasted_bytes
        stats = collect_stats(self)
        return RunResult(cfg, stats, self.packets, self.engine, self.mac, self.lte,
                         self.bwr, self.transport, self.api)


def completed(packets, warmup: int = 0):
    return [p for p in packets
            if p.ue_return is not None and p.ue_ingress is not None and p.ue_ingress >= warmup]


def collect_stats(sc: Scenario) -> LatencyStats:
    cfg = sc.cfg
    done = completed(sc.packets, cfg.run.warmup)
    ret = return_path_constant(cfg)
    rtt = [p.ue_return - p.ue_ingress for p in done]
    lte_ul = [p.enb_egress - p.ue_ingress for p in done]
    up = [p.cmts_egress - p.cm_ingress for p in done]
    # the DOCSIS share of the round trip: everything that is not LTE air time
    seg = [u + ret - cfg.lte.dl_delay for u in up]
    wait = [p.cm_tx_start - p.cm_ingress for p in done]
    c = sc.mac.counters
    dur_s = cfg.run.duration / US_PER_S
    bg_offered = sum(sc.mac.flow_state(s).offered for s in sc.bg_sids) * 8 / dur_s
    seg_stats = SegmentStats.of(seg)
    # reports generated during the drain tail fall outside the metered duration
    metered = [m for m in sc.bwr.messages if m.generated_at < cfg.run.duration] \
        if sc.bwr is not None else []
    n_bwr = len(metered)
    signaling = sum(m.encoded_size for m in metered) * 8 / dur_s
    return LatencyStats(
        count=len(done),
        rtt=SegmentStats.of(rtt),
        lte_uplink=SegmentStats.of(lte_ul),
        docsis_upstream=SegmentStats.of(up),
        docsis_segment=seg_stats,
        cm_wait=SegmentStats.of(wait),
        docsis_segment_mean=seg_stats.mean,
        wasted_grant_bytes=c.jit_wasted_bytes + c.be_wasted_bytes,
        jit_granted_bytes=c.jit_granted_bytes,
        jit_wasted_bytes=c.jit_wasted_bytes,
        early_grant_violations=c.early_grant_violations,
        bg_offered_bps=bg_offered,
        bg_target_bps=cfg.load.target_utilization * cfg.docsis.raw_bps,
        contention_fraction=sc.mac.contention_fraction,
        delivered_bps=c.delivered_bytes * 8 / dur_s,
        bwr_messages=n_bwr,
        bwr_signaling_bps=signaling,
        req_collisions=c.req_collisions,
        events=sc.engine.events_fired,
    )


def check_invariants(result: RunResult) -> list[str]:
    """In-run assertions; an empty list means every one held."""
    problems = []
    c = result.mac.counters
    if c.early_grant_violations:
        problems.append(f"{c.early_grant_violations} BWR grants started before the data was due")
    if c.tiling_errors:
        problems.append(f"{c.tiling_errors} MAPs do not tile their minislot range")
    if c.ugs_jitter_violations:
        problems.append(f"{c.ugs_jitter_violations} UGS grants outside the jitter bound")
    ret = return_path_constant(result.config)
    bad_order = bad_rtt = 0
    for p in completed(result.packets):
        if not p.stamps_monotone() or p.cm_ingress != p.enb_egress:
            bad_order += 1
        if p.rtt != (p.enb_egress - p.ue_ingress) + (p.cmts_egress - p.cm_ingress) + ret:
            bad_rtt += 1
    if bad_order:
        problems.append(f"{bad_order} packets with out-of-order hop stamps")
    if bad_rtt:
        problems.append(f"{bad_rtt} packets whose RTT is not the sum of its segments")
    for sid in result.mac.flows:
        st = result.mac.flow_state(sid)
        if st.flow.kind != FlowKind.BE:
            continue
        # bytes already sent from a fragmented head frame sit in neither bucket
        partial = st.queue[0][2] - st.queue[0][1] if st.queue else 0
        if st.offered != st.delivered + st.queued + partial:
            problems.append(f"SID {sid}: offered bytes != delivered + queued")
    return problems


def run_ping_experiment(cfg: ScenarioConfig) -> RunResult:
    return Scenario(cfg).run()


# -- sweeps ----------------------------------------------------------------------

@dataclass
class SweepRow:
    load: float
    runs: int
    baseline_rtt_ms: float
    bwr_rtt_ms: float
    baseline_docsis_ms: float
    bwr_docsis_ms: float
    gain: float
    per_seed_gain: list = field(default_factory=list)


def gain(baseline_ms: float, bwr_ms: float) -> float:
    if not baseline_ms or math.isnan(baseline_ms):
        return float("nan")
    return (baseline_ms - bwr_ms) / baseline_ms


def arm_config(cfg: ScenarioConfig, load: float, seed: int, bwr_on: bool) -> ScenarioConfig:
    return cfg.replace(load={"target_utilization": load},
                       run={"seed": seed},
                       bwr={"enabled": bwr_on})


def summarize(results: dict) -> list[SweepRow]:
    """Gain table from {(load, seed, arm): LatencyStats} with arm in {'baseline', 'bwr'}."""
    rows = []
    for load in sorted({k[0] for k in results}):
        seeds = sorted({k[1] for k in results if k[0] == load})
        base = [results[(load, s, "baseline")] for s in seeds]
        bwr = [results[(load, s, "bwr")] for s in seeds]
        b_seg = float(np.mean([r.docsis_segment_mean for r in base]))
        w_seg = float(np.mean([r.docsis_segment_mean for r in bwr]))
        rows.append(SweepRow(
            load=load,
            runs=len(seeds),
            baseline_rtt_ms=float(np.mean([r.rtt.mean for r in base])),
            bwr_rtt_ms=float(np.mean([r.rtt.mean for r in bwr])),
            baseline_docsis_ms=b_seg,
            bwr_docsis_ms=w_seg,
            gain=gain(b_seg, w_seg),
            per_seed_gain=[gain(b.docsis_segment_mean, w.docsis_segment_mean)
                           for b, w in zip(base, bwr)],
        ))
    return rows


def run_load_sweep(cfg: ScenarioConfig, loads: Sequence[float],
                   seeds: Sequence[int]) -> list[SweepRow]:
    """Serial paired sweep: for every load and seed, BWR off then on."""
    for load in loads:
        if not 0.0 <= load <= 0.9:
            raise ValueError(f"load {load} outside [0, 0.9]")
    results = {}
    for load in loads:
        for seed in seeds:
            for arm, on in (("baseline", False), ("bwr", True)):
                results[(load, seed, arm)] = run_ping_experiment(
                    arm_config(cfg, load, seed, on)).stats
    return summarize(results)


# -- export ----------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_packet_trace(packets, path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_HEADER)
            for p in packets:
                if p.ue_return is None:
                    continue
                w.writerow([p.id, p.payload, p.ue_ingress, p.enb_egress, p.cmts_egress, p.rtt])
    except OSError as exc:
        raise OSError(f"cannot write packet trace {path}: {exc.strerror or exc}") from exc


def write_summary(stats: LatencyStats, path, extra: Optional[dict] = None) -> None:
    payload = {"stats": stats.to_dict()}
    if extra:
        payload.update(extra)
    path = Path(path)
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write summary {path}: {exc.strerror or exc}") from exc


def write_gain_csv(rows: Sequence[SweepRow], path) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GAIN_HEADER)
            for r in rows:
                w.writerow([_fmt(float(r.load)), r.runs, _fmt(r.baseline_rtt_ms),
                            _fmt(r.bwr_rtt_ms), _fmt(r.baseline_docsis_ms),
                            _fmt(r.bwr_docsis_ms), _fmt(r.gain)])
    except OSError as exc:
        raise OSError(f"cannot write gain table {path}: {exc.strerror or exc}") from exc


def export_results(result: RunResult, outdir, stem: str = "run") -> list[Path]:
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {outdir}: {exc.strerror or exc}") from exc
    trace = outdir / f"{stem}.csv"
    summary = outdir / f"{stem}.json"
    write_packet_trace(result.packets, trace)
    write_summary(result.stats, summary, {"config": result.config.to_flat()})
    files = [trace, summary]
    if result.config.run.trace:
        ev = outdir / f"{stem}.events.tsv"
        result.engine.write_trace(ev)
        files.append(ev)
    if result.config.run.map_log:
        ml = outdir / f"{stem}.maps.tsv"
        ml.write_text("".join(line + "\n" for line in result.mac.map_log))
        files.append(ml)
    return files
