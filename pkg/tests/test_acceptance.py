"""Acceptance suite, one ``criterion(n)`` marker per requirement.

Run with ``pytest tests/test_acceptance.py``; the terminal summary ends with
one ``criterion N: PASS|FAIL`` line per criterion.
"""

import collections
import random
import sys
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from dmcache.adaptive import ProfitInputs, break_even_threshold, profit
from dmcache.bench import ExperimentConfig, WorkloadSpec, run_experiment
from dmcache.bench.cli import main as bench_main
from dmcache.bench.experiment import ScriptedEvent, build_ops, windowed_hit_rate
from dmcache.bench.workload import object_read_ratios
from dmcache.cache_index import InsertStatus
from dmcache.layout import MODE_ON, from_fixed, to_fixed
from dmcache.sim import run_sync
from modelcheck import OWNER_SCRIPTS, explore, owner_check, owner_scenario
from test_cache_index import TOKEN, _differential, _index, _key

pytestmark = pytest.mark.slow


def _skip_invalidation(cluster):
    for eng in cluster.engines.values():
        eng.skip_invalidation = True
    if cluster.manager is not None:
        cluster.manager.skip_invalidation = True


# -- 1: coherence safety -----------------------------------------------------------

def _safety_spec(rr):
    return WorkloadSpec(cns=4, clients_per_cn=4, read_ratio=rr, object_count=1000,
                        total_ops=100_000, seed=11)


@pytest.mark.criterion(1)
@pytest.mark.parametrize("coherence", ["difache", "difache-noac", "cmcache"])
@pytest.mark.parametrize("rr", [0.5, 0.95, 1.0])
def test_c1_validator_passes(coherence, rr):
    t0 = time.perf_counter()
    res = run_experiment(ExperimentConfig(workload=_safety_spec(rr), coherence=coherence,
                                          torn=True))
    v = res.validate()
    assert time.perf_counter() - t0 < 120
    assert res.metrics.completed == 100_000
    assert v.checked >= 100_000 and v.ok, v.first


@pytest.mark.criterion(1)
@pytest.mark.parametrize("coherence", ["difache", "difache-noac", "cmcache"])
def test_c1_skipped_invalidation_is_caught(coherence):
    res = run_experiment(ExperimentConfig(workload=_safety_spec(0.95), coherence=coherence,
                                          torn=True, setup=_skip_invalidation))
    assert not res.validate().ok


# -- 2: hopscotch table ------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c2_differential_1e5_ops():
    # invariants are checked after every op inside the helper
    _differential(seed=2024, n_ops=100_000, num_buckets=1024, hsize=16)


@pytest.mark.criterion(2)
def test_c2_load_factor_before_first_failure():
    n = 1 << 16
    idx, *_ = _index(n, 16)
    rng = random.Random(5)
    inserted = 0
    while True:
        status, _ = run_sync(idx.insert(_key(rng), 1, TOKEN))
        if status is not InsertStatus.INSERTED:
            break
        inserted += 1
    load = inserted / n
    print("load factor at first failure: %.4f" % load)
    assert load >= 0.95


# -- 3: single-read remote lookup ----------------------------------------------------

@pytest.mark.criterion(3)
@pytest.mark.parametrize("coherence", ["difache", "difache-noac"])
@pytest.mark.parametrize("tracking", ["broadcast", "ownerset"])
def test_c3_one_read_per_probe(coherence, tracking):
    spec = WorkloadSpec(cns=4, clients_per_cn=4, read_ratio=0.9, object_count=1000,
                        total_ops=100_000, seed=3)
    res = run_experiment(ExperimentConfig(workload=spec, coherence=coherence,
                                          owner_tracking=tracking, trace=True,
                                          record_history=False))
    trace = res.cluster.fabric.trace
    attempts = collections.defaultdict(list)
    for e in trace:
        if isinstance(e.tag, tuple) and e.tag[0] == "index_probe":
            assert e.kind == "read"
            attempts[e.tag[1]].append(e.tag[2])
    # every invalidation message starts with exactly one probe
    inv = sum(1 for pid in attempts if pid[0] == "inv")
    assert res.metrics.invalidations == inv > 0
    retried = 0
    for got in attempts.values():
        # attempt 0 is the only read unless a locked neighborhood forced a retry
        assert got == list(range(len(got)))
        retried += len(got) > 1
    assert retried < len(attempts)
    print("%d probes, %d retried after a lock" % (len(attempts), retried))


# -- 4: owner-set soundness ------------------------------------------------------------

@pytest.mark.criterion(4)
@pytest.mark.parametrize("script", OWNER_SCRIPTS, ids=lambda s: "a=%s,b=%s" % (s["a"], s["b"]))
def test_c4_valid_implies_owner_bit(script):
    """Literal form: no reachable state has a valid header with a clear owner bit."""
    states, schedules, bad = explore(owner_scenario(script), owner_check(refined=False))
    assert schedules > 1
    assert bad == [], "%d of %d states, e.g. %s" % (len(bad), states, bad[0][1])


@pytest.mark.criterion(4)
@pytest.mark.parametrize("script", OWNER_SCRIPTS, ids=lambda s: "a=%s,b=%s" % (s["a"], s["b"]))
def test_c4_valid_implies_owned_or_pending(script):
    _, schedules, bad = explore(owner_scenario(script), owner_check(refined=True))
    assert schedules > 1 and bad == []


def _with_fifth_cn(node_id):
    def setup(cl):
        assert 3 in cl.cns
        cl.add_cn(node_id=node_id)
    return setup


@pytest.mark.criterion(4)
def test_c4_aliased_owner_bits():
    """CN 67 shares bit 3 with CN 3: extra invalidations, no stale reads."""
    spec = WorkloadSpec(cns=4, clients_per_cn=4, read_ratio=0.9, object_count=200,
                        total_ops=40_000, seed=6)
    runs = {}
    for node_id in (67, 69):         # 69 maps to an unused bit
        runs[node_id] = res = run_experiment(ExperimentConfig(
            workload=spec, coherence="difache-noac", owner_tracking="ownerset", torn=True,
            setup=_with_fifth_cn(node_id)))
        v = res.validate()
        assert v.ok, v.first
    per_write = {k: r.metrics.invalidations / sum(
        r.metrics.events[e].count for e in ("write-cached", "write-bypass"))
        for k, r in runs.items()}
    print("invalidations per write:", per_write)
    assert per_write[67] > per_write[69]


# -- 5: break-even threshold -----------------------------------------------------------

@pytest.mark.criterion(5)
def test_c5_threshold_oracle_1e4():
    rng = random.Random(12)
    unclamped = clamped = 0
    for _ in range(10_000):
        lat = dict(t_rb=rng.uniform(0.1, 50), t_rhit=rng.uniform(0.01, 5),
                   t_rmiss=rng.uniform(0.1, 60), t_wb=rng.uniform(0.1, 50),
                   t_wcached=rng.uniform(0.1, 120))
        h = rng.random()
        r = break_even_threshold(h, **lat)
        f = lambda x: profit(ProfitInputs.from_rates(x, h, lat))   # noqa: E731
        tmax = max(lat.values())
        if 0.0 < r < 1.0:
            unclamped += 1
            assert abs(f(r)) <= 2 ** -12 * tmax
            # the 16-bit value stored in headers
            assert abs(f(from_fixed(to_fixed(r)))) <= 2 ** -12 * tmax
        else:
            clamped += 1
            lo, hi = f(0.0), f(1.0)
            if lo < 0 < hi:
                # profit rises through zero: the clamp may only hide a root at an edge
                root = brentq(f, 0.0, 1.0, xtol=1e-12)
                assert min(root, 1.0 - root) < 1e-9
            # caching switches on above r, so r = 0 must pay and r = 1 must not
            if r == 0.0:
                assert lo >= -1e-9 * tmax
            else:
                assert hi <= 1e-9 * tmax
    assert unclamped > 1000 and clamped > 1000


# -- 6: adaptive selectivity -----------------------------------------------------------

_TWO_POP = WorkloadSpec(cns=4, clients_per_cn=4, zipf_alpha=0.0, object_count=64,
                        total_ops=160_000, seed=3, populations=[(0.5, 1.0), (0.5, 0.5)])


@pytest.fixture(scope="module")
def two_pop_runs():
    return {coh: run_experiment(ExperimentConfig(workload=_TWO_POP, coherence=coh,
                                                 record_history=False))
            for coh in ("difache", "difache-noac", "nocache")}


@pytest.mark.criterion(6)
def test_c6_mode_assignment(two_pop_runs):
    cl = two_pop_runs["difache"].cluster
    ratios = object_read_ratios(_TWO_POP, np.random.default_rng(_TWO_POP.seed))
    correct = 0
    for i in range(_TWO_POP.object_count):
        modes = [bool(h[1].state & MODE_ON) for e in cl.engines.values()
                 if (h := e.header_for(cl.addr(i))) is not None]
        want_on = ratios[i] == 1.0
        correct += bool(modes) and all(m == want_on for m in modes)
    assert correct / _TWO_POP.object_count >= 0.9


@pytest.mark.criterion(6)
def test_c6_throughput_order(two_pop_runs):
    thr = {k: r.metrics.throughput for k, r in two_pop_runs.items()}
    print(thr)
    assert thr["difache"] >= thr["difache-noac"]
    assert thr["difache"] >= thr["nocache"]


def _steady_throughput(res):
    c = np.asarray(res.completions)
    h = len(c) // 2
    return (len(c) - h) / (c[-1] - c[h])


@pytest.mark.criterion(6)
def test_c6_write_heavy_uniform_not_slower():
    spec = WorkloadSpec(cns=4, clients_per_cn=4, zipf_alpha=0.0, read_ratio=0.5,
                        object_count=32, total_ops=200_000, seed=3)
    thr = {coh: _steady_throughput(run_experiment(ExperimentConfig(
        workload=spec, coherence=coh, record_history=False))) for coh in ("difache", "nocache")}
    print(thr)
    assert thr["difache"] >= 0.9 * thr["nocache"]


# -- 7: centralized bottleneck ---------------------------------------------------------

@pytest.mark.criterion(7)
def test_c7_write_latency_scaling():
    clients = (16, 32, 64, 128)
    lat = {}
    for coh in ("cmcache", "difache"):
        for n in clients:
            spec = WorkloadSpec(cns=8, clients_per_cn=n // 8, read_ratio=0.95,
                                object_count=10_000, total_ops=40_000, seed=1)
            res = run_experiment(ExperimentConfig(workload=spec, coherence=coh,
                                                  record_history=False))
            lat[coh, n] = res.metrics.write_latency_p50
    print(lat)
    for n in clients:
        assert lat["difache", n] <= 2 * lat["difache", 16]
    cm = [lat["cmcache", n] for n in clients]
    slopes = [(cm[i + 1] - cm[i]) / (clients[i + 1] - clients[i]) for i in range(3)]
    # superlinear: rising, and each doubling adds more per client than the last
    assert all(s > 0 for s in slopes)
    assert slopes[0] < slopes[1] < slopes[2]


# -- 8: broadcast vs owner sets ------------------------------------------------------

def _ops_per_hot_write(tracking):
    spec = WorkloadSpec(cns=8, clients_per_cn=4, read_ratio=0.95, object_count=1000,
                        total_ops=40_000, seed=1)
    stream = build_ops(ExperimentConfig(workload=spec))
    hot = int(np.argmax(np.bincount(stream.objects, minlength=spec.object_count)))
    spans = []
    got = {}

    def wrap(cl):
        trace = cl.fabric.enable_trace()
        key = cl.addr(hot).pack()
        for eng in cl.engines.values():
            def write(obj, data, worker=0, _inner=eng.write):
                start, name = len(trace), cl.sim.current_name
                out = yield from _inner(obj, data, worker)
                if obj.pack() == key:
                    spans.append((start, len(trace), name))
                return out
            eng.write = write
        got["trace"] = trace

    res = run_experiment(ExperimentConfig(workload=spec, coherence="difache",
                                          owner_tracking=tracking, ops=stream,
                                          record_history=False, setup=wrap))
    trace = got["trace"]
    counts = [sum(e.proc == name for e in trace[a:b]) for a, b, name in spans]
    assert len(counts) > 50
    return float(np.mean(counts))


@pytest.mark.criterion(8)
def test_c8_broadcast_cheaper_at_8_cns():
    b, o = _ops_per_hot_write("broadcast"), _ops_per_hot_write("ownerset")
    print("fabric ops per hot write: broadcast %.2f, owner sets %.2f" % (b, o))
    assert b <= o


@pytest.mark.criterion(8)
def test_c8_owner_sets_halve_invalidations_at_64_cns():
    spec = WorkloadSpec(cns=64, clients_per_cn=2, object_count=1000, total_ops=20_000, seed=2)
    inv = {t: run_experiment(ExperimentConfig(workload=spec, coherence="difache",
                                              owner_tracking=t, record_history=False)
                             ).metrics.invalidations
           for t in ("broadcast", "ownerset")}
    print(inv)
    assert inv["ownerset"] < 0.5 * inv["broadcast"]


# -- 9: fault timeline -----------------------------------------------------------------

@pytest.mark.criterion(9)
def test_c9_fault_timeline():
    ops, window = 100_000, 500
    spec = WorkloadSpec(cns=4, clients_per_cn=4, read_ratio=0.95, object_count=1000,
                        total_ops=ops, seed=4)
    events = [ScriptedEvent(ops * 3 // 10, "kill-cn", 1), ScriptedEvent(ops // 2, "kill-mn"),
              ScriptedEvent(ops * 6 // 10, "recover-mn")]
    res = run_experiment(ExperimentConfig(workload=spec, coherence="difache", torn=True,
                                          events=events, timeline=True))
    v = res.validate()
    assert v.ok, v.first
    assert res.metrics.hits_while_fenced == 0
    cn, mn = res.cluster.cns[1], res.cluster.mns[0]
    assert [r for *_, r in res.metrics.fences] == [
        "remove %d" % cn, "mn %d down" % mn, "mn %d recovered" % mn]
    fired = dict((a, t) for t, a in res.fired)
    reads = [t for t, ev in res.timeline if ev in ("read-hit", "read-miss", "read-bypass")]
    rates = windowed_hit_rate(res.timeline, window)
    ends = [reads[(i + 1) * window - 1] for i in range(len(rates))]
    before = [r for r, t in zip(rates, ends) if t < fired["kill-cn"]]
    level = float(np.mean(before[-10:]))
    warmup = next(i for i, r in enumerate(before) if r >= 0.9 * level) + 1
    after = [r for r, t in zip(rates, ends) if t > fired["recover-mn"]]
    back = next((i for i, r in enumerate(after) if r >= 0.9 * level), None)
    print("level %.3f, warmup %d windows, recovered after %s windows" % (level, warmup, back))
    assert back is not None and back + 1 <= 10 * warmup


# -- 10: determinism -------------------------------------------------------------------

@pytest.mark.criterion(10)
@pytest.mark.parametrize("argv", [
    ["synth", "--coherence", "difache"],
    ["synth", "--coherence", "difache-noac", "--owner-tracking", "ownerset"],
    ["synth", "--coherence", "cmcache", "--read-ratio", "0.5"],
    ["synth", "--coherence", "nocache"],
    ["faults", "--torn"],
], ids=lambda a: "-".join(x.lstrip("-") for x in a))
def test_c10_rerun_is_byte_identical(argv, tmp_path):
    base = argv + ["--cns", "4", "--clients-per-cn", "4", "--objects", "1000",
                   "--ops", "20000", "--seed", "9"]
    outs = []
    for i in range(2):
        path = tmp_path / ("run%d.csv" % i)
        assert bench_main(base + ["--out", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
