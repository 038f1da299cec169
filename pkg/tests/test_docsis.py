import random

import pytest

from bwrsim.docsis import (CONTENTION, DocsisConfigError, DocsisMac, FlowKind, MapElement,
                           PhyConfig, ReqOrigin, ReqRecord, ServiceFlow)
from bwrsim.sim_core import Engine, ms


def mac_with(*flows, seed=1, **kw):
    eng = Engine(seed=seed)
    mac = DocsisMac(eng, PhyConfig(), **kw)
    for f in flows:
        mac.add_flow(f)
    return eng, mac


def be(sid, cm=None, **kw):
    return ServiceFlow(sid, FlowKind.BE, cm if cm is not None else sid, **kw)


def ugs(sid, **kw):
    return ServiceFlow(sid, FlowKind.UGS, 0, **kw)


def capture_maps(mac):
    maps = []
    orig = mac.build_map

    def build(now):
        m = orig(now)
        maps.append(m)
        return m
    mac.build_map = build
    return maps


# -- PHY arithmetic ---------------------------------------------------------------

def test_phy_defaults():
    phy = PhyConfig()
    assert phy.raw_bps == 7_680_000
    assert phy.minislot_ns == 6250
    assert phy.minislot_bytes == 6
    assert phy.slots_per_map == 320
    assert phy.map_lookahead == 3500


def test_slots_for_ping_frame():
    assert PhyConfig().slots_for(1308) == 218


def test_map_interval_must_be_whole_minislots():
    with pytest.raises(DocsisConfigError):
        PhyConfig(map_interval=2003)


# -- MAP construction ---------------------------------------------------------------

def test_empty_map_is_all_contention():
    eng, mac = mac_with()
    m = mac.build_map(0)
    assert m.end - m.start == 320
    assert [el.sid for el in m.elements] == [CONTENTION]
    assert m.contention_slots == 320


def test_pending_request_granted_in_minislots():
    eng, mac = mac_with(be(2))
    mac.submit(ReqRecord(2, 1308, 0, ReqOrigin.CONTENTION))
    m = mac.build_map(ms(2))
    grants = [el for el in m.elements if el.sid == 2]
    assert len(grants) == 1
    assert grants[0].count == 218 and grants[0].granted_bytes == 1308
    assert m.tiles()
    assert m.contention_slots == 320 - 218


def test_request_waits_for_processing_time():
    eng, mac = mac_with(be(2))
    mac.submit(ReqRecord(2, 100, 1000, ReqOrigin.CONTENTION))
    assert not [el for el in mac.build_map(2000).elements if el.sid == 2]
    assert [el for el in mac.build_map(4000).elements if el.sid == 2]


def test_large_request_spans_maps():
    eng, mac = mac_with(be(2))
    mac.submit(ReqRecord(2, 3000, 0, ReqOrigin.CONTENTION))
    first = sum(el.granted_bytes for el in mac.build_map(ms(2)).elements if el.sid == 2)
    second = sum(el.granted_bytes for el in mac.build_map(ms(4)).elements if el.sid == 2)
    assert first == 320 * 6 and first + second == 3000


def test_earliest_grant_time_is_honoured():
    eng, mac = mac_with(be(2))
    m0 = mac.build_map(0)
    t_mid = mac.phy.slot_time(m0.end + 100)
    mac.submit(ReqRecord(2, 600, 0, ReqOrigin.BWR_API, earliest_grant_time=t_mid))
    m = mac.build_map(ms(2))
    el, = [e for e in m.elements if e.sid == 2]
    assert mac.phy.slot_time(el.start) >= t_mid
    assert mac.counters.early_grant_violations == 0


def test_earliest_time_only_for_api_requests():
    with pytest.raises(ValueError):
        ReqRecord(2, 100, 0, ReqOrigin.CONTENTION, earliest_grant_time=5)


# -- UGS -------------------------------------------------------------------------

def _ugs_rate(flow, window=(ms(10), ms(1010))):
    eng, mac = mac_with(flow)
    starts = []
    mac.on_grant.append(lambda el, now: starts.append(now))
    mac.start()
    eng.run_until(window[1] + ms(10))
    n = sum(1 for t in starts if window[0] <= t < window[1])
    return n * flow.grant_size_bytes * 8 * 1_000_000 / (window[1] - window[0]), starts, mac


def test_ugs_default_reservation_360kbps():
    rate, _, _ = _ugs_rate(ugs(1, phase=250))
    assert rate == 360_000


def test_ugs_1ms_80B_is_640kbps():
    rate, _, _ = _ugs_rate(ugs(1, grant_interval=1000, grants_per_interval=1,
                               grant_size_bytes=80, jitter_bound=0))
    assert rate == 640_000


def test_ugs_zero_jitter_exact_positions():
    _, starts, mac = _ugs_rate(ugs(1, grant_interval=4000, grants_per_interval=2,
                                   jitter_bound=0, phase=0))
    assert all(t % 2000 == 0 for t in starts)
    assert set(mac.ugs_gaps[1]) == {2000}
    assert mac.counters.ugs_jitter_violations == 0


def test_ugs_gaps_within_jitter_under_load():
    eng, mac = mac_with(ugs(1, phase=250), *[be(100 + i, cm=i) for i in range(5)])
    rnd = random.Random(3)
    for i in range(2000):
        eng.schedule(rnd.randrange(ms(1000)), "bg", "data", mac.cm_on_data,
                     100 + rnd.randrange(5), rnd.choice([200, 600, 1400]))
    mac.start()
    eng.run_until(ms(1100))
    gaps = mac.ugs_gaps[1]
    assert gaps and all(1500 <= g <= 2500 for g in gaps)
    assert mac.counters.ugs_jitter_violations == 0


def test_ugs_payload_padding_counted_as_slack():
    eng, mac = mac_with(ugs(1))
    got = []
    mac.on_ugs_payload = lambda payload, size: got.append((payload, size, eng.now))
    mac.queue_ugs_payload(1, b"r" * 80, 80)
    mac.cm_transmit(MapElement(1, 0, 15, 90, "UGS"))
    eng.run_until(ms(1))
    assert got and got[0][1] == 80
    assert mac.counters.ugs_slack_bytes == 10


# -- cable modem side -------------------------------------------------------------

def test_piggyback_request_for_remainder():
    eng, mac = mac_with(be(2))
    mac.cm_on_data(2, 2000 - 16)      # 2000 B on the wire
    el = MapElement(2, 0, 218, 1308, ReqOrigin.CONTENTION.value)
    mac.cm_transmit(el)
    rec = mac.req_log[-1]
    assert rec.origin == ReqOrigin.PIGGYBACK and rec.bytes == 692
    assert el.used_bytes == 1308


def test_no_piggyback_falls_back_to_contention():
    eng, mac = mac_with(be(2), piggyback=False)
    mac.cm_on_data(2, 1984)
    mac.cm_transmit(MapElement(2, 0, 218, 1308, ReqOrigin.CONTENTION.value))
    assert not any(r.origin == ReqOrigin.PIGGYBACK for r in mac.req_log)
    assert mac.flow_state(2).contending


def test_jit_grant_with_no_data_is_wasted():
    eng, mac = mac_with(be(2))
    rec = ReqRecord(2, 1308, 0, ReqOrigin.BWR_API, earliest_grant_time=10)
    mac.cm_transmit(MapElement(2, 0, 218, 1308, ReqOrigin.BWR_API.value, rec))
    assert mac.counters.jit_wasted_bytes == 1308
    assert mac.counters.delivered_bytes == 0


def test_collision_doubles_both_windows():
    eng, mac = mac_with(be(2, cm=0, backoff_start_exp=0), be(3, cm=1, backoff_start_exp=0))
    mac.start()
    eng.run_until(ms(4))        # first MAP has reached the modems
    mac.cm_on_data(2, 100)
    mac.cm_on_data(3, 100)
    # window of one slot: both pick the first contention slot
    slot2 = list(mac._contention_tx)
    assert len(slot2) == 1 and len(mac._contention_tx[slot2[0]]) == 2
    # the loss is learned from the next MAP (delivered at 5 ms), which restarts backoff
    eng.run_until(ms(5))
    assert mac.counters.req_collisions == 2
    assert mac.flow_state(2).exp == 1 and mac.flow_state(3).exp == 1


def test_single_cm_idle_req_to_data_floor():
    eng, mac = mac_with(be(2))
    done = {}
    mac.on_cmts_egress = lambda pkts: done.update({id(p): eng.now for p in pkts})

    class Tag:
        cm_ingress = cm_tx_start = cmts_egress = None

    rnd = random.Random(8)
    tags = []
    t = ms(10)
    for _ in range(300):
        t += ms(30) + rnd.randrange(ms(2))
        tag = Tag()
        tags.append(tag)
        eng.schedule(t, "cm", "data", mac.cm_on_data, 2, 84, tag)
    mac.start()
    eng.run_until(t + ms(100))
    reqs = [r for r in mac.req_log if r.origin == ReqOrigin.CONTENTION]
    assert len(reqs) == 300
    lat = [r.done_at - r.tx_time for r in reqs]
    serial = mac.phy.slot_time(mac.phy.slots_for(100))
    assert min(lat) >= 5000
    assert max(lat) <= 2 * 2000 + 3500 + serial
    assert len(done) == 300


def test_background_conservation_and_tiling():
    eng, mac = mac_with(*[be(100 + i, cm=i) for i in range(10)], seed=5)
    maps = capture_maps(mac)
    rnd = random.Random(5)
    offered = 0
    for i in range(3000):
        size = rnd.choice([200, 600, 1400])
        offered += size + 16
        eng.schedule(rnd.randrange(ms(2000)), "bg", "data", mac.cm_on_data,
                     100 + rnd.randrange(10), size)
    mac.start()
    eng.run_until(ms(3000))
    assert all(m.tiles() for m in maps)
    assert mac.counters.tiling_errors == 0
    c = mac.counters
    assert c.delivered_bytes == offered
    assert c.be_granted_bytes >= c.delivered_bytes
    # delivered bits never exceed the non-contention share of the raw channel
    channel_s = c.total_slots * mac.phy.minislot_ns / 1e9
    assert c.delivered_bytes * 8 / channel_s <= 7_680_000 * (1 - mac.contention_fraction)
