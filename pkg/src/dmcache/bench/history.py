"""Completed-operation log and the object-level coherence check."""

from dataclasses import dataclass
import math

import numpy as np


@dataclass
class OpRecord:
    obj: int
    kind: str          # "read" or "write"
    start: float
    end: float         # math.inf for writes that never finished
    version: int
    cn: int = -1


@dataclass
class Violation:
    record: OpRecord
    low: int
    high: int

    def __str__(self):
        r = self.record
        return ("read of object %d on CN %d over [%.3f, %.3f] returned version %d, "
                "allowed [%d, %d]" % (r.obj, r.cn, r.start, r.end, r.version, self.low, self.high))


class History:
    def __init__(self):
        self.ops = []
        self.max_started = {}

    def write_started(self, obj, version):
        if version > self.max_started.get(obj, 0):
            self.max_started[obj] = version

    def add(self, rec):
        self.ops.append(rec)
        if rec.kind == "write":
            self.write_started(rec.obj, rec.version)

    def __len__(self):
        return len(self.ops)


@dataclass
class ValidationResult:
    ok: bool
    checked: int
    violations: list

    @property
    def first(self):
        return self.violations[0] if self.violations else None


def validate_history(ops, initial_version=0, max_violations=16):
    """Check every read against the writes around it.

    A read's version must be at least the newest version whose write ended
    before the read started, and at most the newest version whose write
    started before the read ended. The initial image counts as a write that
    finished at time -inf.
    """
    by_obj = {}
    for op in ops:
        by_obj.setdefault(op.obj, ([], []))[0 if op.kind == "write" else 1].append(op)
    violations = []
    checked = 0
    for obj, (writes, reads) in by_obj.items():
        if not reads:
            continue
        ends = np.array([w.end for w in writes] + [-math.inf])
        starts = np.array([w.start for w in writes] + [-math.inf])
        vers = np.array([w.version for w in writes] + [initial_version], dtype=np.int64)
        eo = np.argsort(ends, kind="stable")
        so = np.argsort(starts, kind="stable")
        end_sorted, end_max = ends[eo], np.maximum.accumulate(vers[eo])
        start_sorted, start_max = starts[so], np.maximum.accumulate(vers[so])
        rs = np.array([r.start for r in reads])
        re_ = np.array([r.end for r in reads])
        i = np.searchsorted(end_sorted, rs, side="left") - 1      # writes ending before start
        j = np.searchsorted(start_sorted, re_, side="right") - 1  # writes starting by the end
        low = np.where(i >= 0, end_max[np.maximum(i, 0)], initial_version)
        high = np.where(j >= 0, start_max[np.maximum(j, 0)], initial_version)
        got = np.array([r.version for r in reads], dtype=np.int64)
        checked += len(reads)
        for k in np.flatnonzero((got < low) | (got > high)):
            violations.append(Violation(reads[k], int(low[k]), int(high[k])))
            if len(violations) >= max_violations:
                return ValidationResult(False, checked, violations)
    return ValidationResult(not violations, checked, violations)
