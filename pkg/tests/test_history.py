import math
import random

from hypothesis import given, settings, strategies as st

from dmcache.bench.client import decode, encode
from dmcache.bench.history import History, OpRecord, validate_history


def W(v, s, e, obj=0):
    return OpRecord(obj, "write", s, e, v)


def R(v, s, e, obj=0):
    return OpRecord(obj, "read", s, e, v)


def test_fresh_and_concurrent_reads_pass():
    ops = [W(1, 0, 10), W(2, 20, 30), R(1, 11, 12), R(1, 15, 25), R(2, 15, 25), R(0, -5, 1)]
    v = validate_history(ops)
    assert v.ok and v.checked == 4


def test_stale_read_fails():
    ops = [W(1, 0, 10), W(2, 20, 30), R(1, 31, 32)]
    v = validate_history(ops)
    assert not v.ok
    assert (v.first.low, v.first.high) == (2, 2)
    assert "returned version 1" in str(v.first)


def test_future_read_fails():
    v = validate_history([W(1, 10, 20), R(1, 0, 5)])
    assert not v.ok and v.first.high == 0


def test_unfinished_write_may_or_may_not_be_seen():
    ops = [W(1, 0, 1), W(2, 5, math.inf), R(1, 10, 11), R(2, 12, 13), R(1, 100, 101)]
    assert validate_history(ops).ok


def test_objects_are_independent():
    ops = [W(5, 0, 1, obj=1), R(0, 2, 3, obj=0), R(5, 2, 3, obj=1)]
    assert validate_history(ops).ok
    assert not validate_history(ops + [R(0, 2, 3, obj=1)]).ok


def test_history_tracks_max_started():
    h = History()
    h.write_started(3, 7)
    h.add(W(5, 0, 1, obj=3))
    h.add(R(5, 2, 3, obj=3))
    assert h.max_started[3] == 7 and len(h) == 2


def _oracle(ops):
    """Quadratic definition of the check, for comparison."""
    bad = 0
    writes = [w for w in ops if w.kind == "write"]
    for r in ops:
        if r.kind != "read":
            continue
        low = max([w.version for w in writes if w.obj == r.obj and w.end < r.start], default=0)
        high = max([w.version for w in writes if w.obj == r.obj and w.start <= r.end],
                   default=0)
        bad += not (low <= r.version <= high)
    return bad


@settings(max_examples=200)
@given(st.integers(0, 2**32))
def test_matches_quadratic_oracle(seed):
    rng = random.Random(seed)
    ops = []
    for obj in range(2):
        t = 0.0
        for v in range(1, rng.randint(1, 6)):
            s = t + rng.uniform(0, 3)
            e = s + rng.uniform(0, 3) if rng.random() < 0.9 else math.inf
            ops.append(W(v, s, e, obj))
            t = s
        for _ in range(rng.randint(0, 8)):
            s = rng.uniform(-2, t + 5)
            ops.append(R(rng.randint(0, 6), s, s + rng.uniform(0, 3), obj))
    v = validate_history(ops, max_violations=10**6)
    assert len(v.violations) == _oracle(ops)


@given(st.integers(0, 2**40), st.integers(16, 200))
def test_encode_decode(version, size):
    img = encode(version, size)
    assert len(img) == size
    assert decode(img) == (version, version, True)


def test_torn_image_detected():
    old, new = encode(3, 64), encode(4, 64)
    torn = new[:24] + old[24:]
    head, tail, ok = decode(torn)
    assert head != tail or not ok
