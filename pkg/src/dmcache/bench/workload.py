"""Synthetic Zipf workloads and cache-trace replay."""

import csv
from dataclasses import dataclass, field
import hashlib
from pathlib import Path

import numpy as np

READ_VERBS = frozenset({"get", "gets"})
WRITE_VERBS = frozenset({"set", "add", "replace", "cas", "append", "prepend", "incr", "decr"})
IGNORED_VERBS = frozenset({"delete"})
MIN_SIZE = 16
MAX_SIZE = 64 * 1024


class EmptyTrace(ValueError):
    pass


@dataclass
class WorkloadSpec:
    cns: int = 8
    clients_per_cn: int = 16
    read_ratio: float = 0.95
    zipf_alpha: float = 0.99
    object_size: int = 1024
    object_count: int = 1_000_000
    total_ops: int = 100_000
    seed: int = 0
    populations: list = field(default_factory=list)   # [(fraction, read_ratio), ...]

    def __post_init__(self):
        if not 0.0 <= self.read_ratio <= 1.0:
            raise ValueError("read_ratio must be in [0, 1]")
        if self.zipf_alpha < 0:
            raise ValueError("zipf_alpha must be >= 0")
        if self.object_count < 1 or self.total_ops < 0:
            raise ValueError("need at least one object and a non-negative op count")
        if self.object_size < MIN_SIZE:
            raise ValueError("object_size must be >= %d" % MIN_SIZE)
        if self.populations:
            total = sum(f for f, _ in self.populations)
            if abs(total - 1.0) > 1e-9:
                raise ValueError("population fractions must sum to 1")


@dataclass
class OpStream:
    """Column-oriented op list: object index and write flag per op."""

    objects: np.ndarray
    writes: np.ndarray
    sizes: np.ndarray            # per object
    keys: list = None            # original trace keys, when replayed

    def __len__(self):
        return len(self.objects)


def zipf_pmf(n, alpha):
    w = np.arange(1, n + 1, dtype=np.float64) ** -alpha
    return w / w.sum()


def object_read_ratios(spec, rng):
    """Per-object read ratio; populations are assigned over a random permutation."""
    n = spec.object_count
    ratios = np.full(n, spec.read_ratio, dtype=np.float64)
    if spec.populations:
        order = rng.permutation(n)
        start = 0
        for i, (frac, rr) in enumerate(spec.populations):
            stop = n if i == len(spec.populations) - 1 else start + int(round(frac * n))
            ratios[order[start:stop]] = rr
            start = stop
    return ratios


def gen_synthetic(spec, seed=None):
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n = spec.object_count
    ratios = object_read_ratios(spec, rng)
    if spec.zipf_alpha > 0:
        cdf = np.cumsum(zipf_pmf(n, spec.zipf_alpha))
        cdf[-1] = 1.0
        ranks = np.searchsorted(cdf, rng.random(spec.total_ops), side="right")
        # hot ranks land on random object ids
        objs = rng.permutation(n)[ranks]
    else:
        objs = rng.integers(0, n, spec.total_ops)
    writes = rng.random(spec.total_ops) >= ratios[objs]
    sizes = np.full(n, spec.object_size, dtype=np.int64)
    return OpStream(objs.astype(np.int64), writes, sizes)


@dataclass
class TraceRecord:
    timestamp: int
    key: str
    key_size: int
    value_size: int
    client_id: int
    operation: str
    ttl: int

    @property
    def object_id(self):
        return key_hash(self.key)

    @property
    def size(self):
        return min(MAX_SIZE, max(MIN_SIZE, self.key_size + self.value_size))

    @property
    def is_write(self):
        return self.operation in WRITE_VERBS


def key_hash(key):
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")


class TraceReader:
    """Iterate the valid records of a trace CSV; counts what it skips."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(path)
        self.malformed = 0
        self.ignored = 0

    def __iter__(self):
        with self.path.open(newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#"):
                    continue
                try:
                    ts, key, ks, vs, cid, op, ttl = row
                    rec = TraceRecord(int(ts), key, int(ks), int(vs), int(cid),
                                      op.strip().lower(), int(ttl))
                except ValueError:
                    self.malformed += 1
                    continue
                if rec.operation in IGNORED_VERBS:
                    self.ignored += 1
                    continue
                if rec.operation not in READ_VERBS and rec.operation not in WRITE_VERBS:
                    self.malformed += 1
                    continue
                yield rec


def parse_trace(path):
    """All usable records of a trace file (raises EmptyTrace if none)."""
    reader = TraceReader(path)
    recs = list(reader)
    if not recs:
        raise EmptyTrace("no usable records in %s" % path)
    return recs


def trace_ops(records, limit=None):
    """Map records to an OpStream with dense object indices in first-seen order."""
    index = {}
    keys = []
    sizes = []
    objs = []
    writes = []
    for rec in records[:limit] if limit else records:
        i = index.get(rec.key)
        if i is None:
            i = index[rec.key] = len(keys)
            keys.append(rec.key)
            sizes.append(rec.size)
        elif rec.size > sizes[i]:
            sizes[i] = rec.size
        objs.append(i)
        writes.append(rec.is_write)
    return OpStream(np.asarray(objs, dtype=np.int64), np.asarray(writes, dtype=bool),
                    np.asarray(sizes, dtype=np.int64), keys)
