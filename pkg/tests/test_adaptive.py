import math
import random

import pytest
from hypothesis import assume, given, strategies as st
from scipy.optimize import brentq

from dmcache.adaptive import (LatencyBuffers, ProfitInputs, SwitchResult, break_even_threshold,
                              mode_lock_offset, profit, switch_mode)
from dmcache.cluster import Cluster, ClusterConfig
from dmcache.layout import (DEFAULT_THRESHOLD, INITIAL_INTERVAL, MODE_ON, SETTLED_INTERVAL,
                            THRESHOLD_ONE, CacheHeader, from_fixed, lanes, pack_lanes, to_fixed)

lat = st.floats(0.01, 100.0)


def _run(sim, gen):
    out = {}

    def p():
        out["v"] = yield from gen

    sim.spawn(p())
    sim.run()
    return out.get("v")


def _latencies(t_rb, t_rhit, t_rmiss, t_wb, t_wcached):
    return dict(t_rb=t_rb, t_rhit=t_rhit, t_rmiss=t_rmiss, t_wb=t_wb, t_wcached=t_wcached)


def test_profit_by_hand():
    p = ProfitInputs(r_rhit=0.6, r_rmiss=0.2, r_w=0.2, t_rb=3.0, t_rhit=0.5, t_rmiss=3.5,
                     t_wb=3.0, t_wcached=6.5)
    assert profit(p) == pytest.approx(0.6 * 2.5 + 0.2 * -0.5 + 0.2 * -3.5)


def test_from_rates_splits_reads():
    p = ProfitInputs.from_rates(0.8, 0.75, _latencies(1, 2, 3, 4, 5))
    assert (p.r_rhit, p.r_rmiss, p.r_w) == pytest.approx((0.6, 0.2, 0.2))


@given(st.floats(0, 1), lat, lat, lat, lat, lat)
def test_threshold_zeroes_profit(h, t_rb, t_rhit, t_rmiss, t_wb, t_wcached):
    L = _latencies(t_rb, t_rhit, t_rmiss, t_wb, t_wcached)
    r = break_even_threshold(h, **L)
    assert 0.0 <= r <= 1.0
    at = profit(ProfitInputs.from_rates(r, h, L))
    if 0.0 < r < 1.0:
        assert abs(at) <= 2 ** -12 * max(L.values())
    # caching pays off exactly above the threshold
    for rr in (r + 0.01, r - 0.01):
        if 0.0 <= rr <= 1.0:
            pr = profit(ProfitInputs.from_rates(rr, h, L))
            if abs(pr) > 1e-9:
                assert (pr > 0) == (rr > r)


@given(st.floats(0, 1), lat, lat, lat, lat, lat)
def test_threshold_matches_root_finder(h, t_rb, t_rhit, t_rmiss, t_wb, t_wcached):
    L = _latencies(t_rb, t_rhit, t_rmiss, t_wb, t_wcached)
    f = lambda r: profit(ProfitInputs.from_rates(r, h, L))   # noqa: E731
    lo, hi = f(0.0), f(1.0)
    assume(abs(lo) > 1e-9 and abs(hi) > 1e-9)
    r = break_even_threshold(h, **L)
    if lo < 0 < hi:
        assert r == pytest.approx(brentq(f, 0.0, 1.0, xtol=1e-14), abs=1e-9)
    elif lo > 0 and hi > 0:
        assert r == 0.0          # profitable at every read ratio
    elif lo < 0 and hi < 0:
        assert r == 1.0          # never profitable
    else:
        # profit falls with reads: no read ratio makes caching pay off above r
        assert r in (0.0, 1.0)


def test_threshold_with_engine_defaults():
    # default latencies: bypass 3.3, hit 0.45, miss 3.6, cached write 6.6
    r = break_even_threshold(1.0, 3.3, 0.45, 3.6, 3.3, 6.6)
    assert r == pytest.approx(3.3 / (3.3 + 2.85))


def test_fixed_point_and_lanes():
    assert to_fixed(1.0) == THRESHOLD_ONE and to_fixed(-1) == 0 and to_fixed(2) == THRESHOLD_ONE
    assert from_fixed(to_fixed(DEFAULT_THRESHOLD)) == pytest.approx(0.75, abs=1e-4)
    assert lanes(pack_lanes(5, 3, 9)) == (5, 3, 9)
    assert lanes(pack_lanes(70000, 0, 0))[0] == 70000 & 0xFFFF


def test_header_roundtrip():
    h = CacheHeader(state=MODE_ON | 1, counters=pack_lanes(1, 2, 3), threshold=100,
                    interval=255, buf_offset=4096, size=64, owner_slot=7)
    raw = h.pack()
    assert len(raw) == 32 and CacheHeader.unpack(raw) == h
    assert h.valid and h.mode_on and not h.switching


def test_latency_buffers():
    b = LatencyBuffers(capacity=3, defaults={"read-hit": 9.0})
    assert b.aggregate("read-hit") == 9.0
    assert b.aggregate("read-miss") is None
    for v in (1.0, 2.0, 100.0, 3.0):      # capacity 3 drops the first sample
        b.record(0, "read-hit", v)
    b.record(1, "read-hit", 10.0)
    # mean over workers of per-worker medians: (median(2, 100, 3) + 10) / 2
    assert b.aggregate("read-hit") == pytest.approx((3.0 + 10.0) / 2)
    first = b.latencies()
    b.record(1, "read-hit", 1000.0)
    assert b.latencies() is first           # cached until 64 new samples
    for _ in range(64):
        b.record(2, "read-miss", 1.0)
    assert b.latencies()["t_rmiss"] == 1.0


# -- engine scenarios ---------------------------------------------------------------

def _cluster(cns=2, **kw):
    return Cluster(ClusterConfig(cns=cns, objects=4, object_size=64, owner_tracking="broadcast",
                                 mode_lock_count=64, **kw))


def _hdr(cl, cn, i=0):
    hv = cl.engines[cn].header_for(cl.addr(i))
    return None if hv is None else hv[1]


def test_new_header_starts_off_with_defaults():
    cl = _cluster()
    a = cl.cns[0]
    _run(cl.sim, cl.engines[a].read(cl.addr(0), 64))
    h = _hdr(cl, a)
    assert not h.mode_on and not h.valid
    assert h.interval == INITIAL_INTERVAL
    assert from_fixed(h.threshold) == pytest.approx(DEFAULT_THRESHOLD, abs=1e-4)
    assert cl.engines[a].events["read-bypass"] == 1


def test_read_heavy_object_switches_on_everywhere():
    cl = _cluster()
    a, b = cl.cns
    obj = cl.addr(0)
    _run(cl.sim, cl.engines[b].read(obj, 64))       # b indexes it too
    for _ in range(INITIAL_INTERVAL):
        _run(cl.sim, cl.engines[a].read(obj, 64))
    for cn in (a, b):
        h = _hdr(cl, cn)
        assert h.mode_on and not h.switching
        assert h.interval == SETTLED_INTERVAL
    assert _hdr(cl, a).threshold == _hdr(cl, b).threshold
    assert cl.engines[a].switches["on"] == 1
    # now reads hit
    _run(cl.sim, cl.engines[a].read(obj, 64))
    _run(cl.sim, cl.engines[a].read(obj, 64))
    assert cl.engines[a].events["read-hit"] >= 1


def test_write_heavy_object_stays_off():
    cl = _cluster()
    a = cl.cns[0]
    obj = cl.addr(0)
    for i in range(4 * INITIAL_INTERVAL):
        eng = cl.engines[a]
        gen = eng.write(obj, bytes([i]) * 64) if i % 2 else eng.read(obj, 64)
        _run(cl.sim, gen)
    assert not _hdr(cl, a).mode_on
    assert cl.engines[a].switches["on"] == 0


def test_mode_turns_off_when_writes_take_over():
    cl = _cluster()
    a, b = cl.cns
    obj = cl.addr(0)
    for _ in range(INITIAL_INTERVAL):
        _run(cl.sim, cl.engines[a].read(obj, 64))
    assert _hdr(cl, a).mode_on
    for i in range(SETTLED_INTERVAL):
        _run(cl.sim, cl.engines[a].write(obj, bytes([i % 256]) * 64))
    assert not _hdr(cl, a).mode_on
    assert cl.engines[a].switches["off"] == 1


def test_late_joiner_adopts_peer_mode():
    cl = _cluster(cns=3)
    a, b, c = cl.cns
    obj = cl.addr(0)
    for _ in range(INITIAL_INTERVAL):
        _run(cl.sim, cl.engines[a].read(obj, 64))
    _run(cl.sim, cl.engines[c].read(obj, 64))
    h = _hdr(cl, c)
    assert h.mode_on and h.interval == SETTLED_INTERVAL
    assert h.threshold == _hdr(cl, a).threshold


def test_switch_is_idempotent_and_synchronizes():
    cl = _cluster()
    a, b = cl.cns
    obj = cl.addr(1)
    for cn in (a, b):
        _run(cl.sim, cl.engines[cn].read(obj, 64))
    assert _run(cl.sim, switch_mode(cl.engines[a], obj, True)) is SwitchResult.SWITCHED
    assert _run(cl.sim, switch_mode(cl.engines[b], obj, True)) is SwitchResult.ALREADY_SWITCHED
    assert _hdr(cl, a, 1).mode_on and _hdr(cl, b, 1).mode_on
    # no copy is valid right after a switch
    assert not _hdr(cl, a, 1).valid and not _hdr(cl, b, 1).valid
    # mode lock released
    off = mode_lock_offset(cl.mn_layouts[obj.node], obj.pack())
    assert cl.fabric.memory(obj.node)[off:off + 8] == bytes(8)


def test_atomic_ops_force_mode_off():
    cl = _cluster()
    a, b = cl.cns
    obj = cl.addr(2)
    for _ in range(INITIAL_INTERVAL):
        _run(cl.sim, cl.engines[b].read(obj, 64))
    assert _hdr(cl, b, 2).mode_on
    assert _run(cl.sim, cl.engines[a].faa(obj, 5)) == 0
    assert _run(cl.sim, cl.engines[a].cas(obj, 5, 9)) == 5
    assert not _hdr(cl, b, 2).mode_on


def test_concurrent_readers_switch_once():
    """Many workers crossing the interval together run one switch, not many."""
    for seed in range(20):
        cl = _cluster(cns=3, jitter=0.5, seed=seed)
        cl.sim.rng = random.Random(seed)
        obj = cl.addr(0)
        for cn in cl.cns:
            for w in range(4):
                def worker(e=cl.engines[cn], w=w):
                    for _ in range(6):
                        yield from e.read(obj, 64, w)
                cl.sim.spawn(worker())
        cl.sim.run()
        on = sum(e.switches["on"] for e in cl.engines.values())
        assert on == 1
        assert all(_hdr(cl, cn).mode_on for cn in cl.cns)
        assert all(not _hdr(cl, cn).switching for cn in cl.cns)


def test_profit_sign_matches_measured_benefit():
    """Sanity: at the engine's defaults a read-only object is worth caching."""
    cl = _cluster()
    L = cl.engines[cl.cns[0]].latencies()
    assert profit(ProfitInputs.from_rates(1.0, 1.0, L)) > 0
    assert profit(ProfitInputs.from_rates(0.0, 0.0, L)) < 0
    assert not math.isnan(break_even_threshold(0.5, **L))
