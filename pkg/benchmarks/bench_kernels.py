"""Compare the compiled kernels with their pure-Python twins.

Usage: python3 benchmarks/bench_kernels.py [--ops N]

Prints per-call timings of each kernel, then the wall time of one small
end-to-end experiment under each backend (run in a subprocess so the
backend switch takes effect at import).
"""

import argparse
import os
import random
import subprocess
import sys
import timeit

from dmcache import _kernels_py
from dmcache.cache_index import HopscotchIndex, IndexConfig
from dmcache.fabric import Fabric, FabricConfig
from dmcache.sim import run_sync

try:
    from dmcache import _kernels as _compiled
except ImportError:
    _compiled = None

E2E = """
import time
from dmcache import kernels
from dmcache.bench import ExperimentConfig, WorkloadSpec, run_experiment
spec = WorkloadSpec(cns=4, clients_per_cn=4, object_count=1000, total_ops={ops}, seed=1)
t = time.perf_counter()
run_experiment(ExperimentConfig(workload=spec, record_history=False))
print(kernels.BACKEND, time.perf_counter() - t)
"""


def _table(n=4096, fill=0.6):
    cfg = IndexConfig(num_buckets=n)
    fab = Fabric(FabricConfig())
    cn = fab.add_node("cn", cfg.nbytes)
    idx = HopscotchIndex(fab.port(cn), 0, cfg)
    rng = random.Random(0)
    keys = []
    for _ in range(int(n * fill)):
        k = rng.getrandbits(63) | 1
        run_sync(idx.insert(k, 1, 1))
        keys.append(k)
    return bytes(fab.memory(cn)), cfg, keys


def micro(impl, buf, cfg, keys, number):
    mask = cfg.num_buckets - 1
    snap = buf[:128]
    k = keys[0]
    h = impl.home_bucket(k, mask)
    nb = buf[(h >> 2) * 64:(h >> 2) * 64 + 128]
    return {
        "home_bucket": timeit.timeit(lambda: impl.home_bucket(k, mask), number=number),
        "any_locked": timeit.timeit(lambda: impl.any_locked(snap), number=number),
        "scan_neighborhood": timeit.timeit(
            lambda: impl.scan_neighborhood(nb, (h >> 2) * 4, h, k, cfg.hsize), number=number),
        "check_table": timeit.timeit(
            lambda: impl.check_table(buf, cfg.total_buckets, mask, cfg.hsize),
            number=max(1, number // 1000)) * 1000,
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--ops", type=int, default=20_000)
    ap.add_argument("--number", type=int, default=20_000)
    args = ap.parse_args(argv)

    buf, cfg, keys = _table()
    impls = [("python", _kernels_py)] + ([("cython", _compiled)] if _compiled else [])
    print("kernel               " + "".join("%12s" % n for n, _ in impls) + "   (us/call)")
    rows = {name: micro(impl, buf, cfg, keys, args.number) for name, impl in impls}
    for kernel in rows["python"]:
        print("%-20s " % kernel + "".join(
            "%12.3f" % (rows[n][kernel] / args.number * 1e6) for n, _ in impls))

    print("\nend-to-end, %d ops:" % args.ops)
    for pure in ("1", "0"):
        env = dict(os.environ, DMCACHE_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", E2E.format(ops=args.ops)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print("  %-8s %.2f s" % (out[0], float(out[1])))


if __name__ == "__main__":
    main()
