"""Pure-Python/numpy twins of the compiled kernels in ``_kernels.pyx``."""

import struct

import numpy as np

GROUP_BYTES = 64
KEYS_AT = 8
VALUES_AT = 40
HOPS_AT = 56
_M64 = (1 << 64) - 1

_unpack_q = struct.Struct("<Q").unpack_from
_unpack_i = struct.Struct("<I").unpack_from
_unpack_h = struct.Struct("<H").unpack_from


def mix64(x):
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


def home_bucket(key, mask):
    return mix64(key) & mask


def scan_neighborhood(buf, first_bucket, home, key, hsize):
    rel = home - first_bucket
    nb = (len(buf) // GROUP_BYTES) * 4
    if rel < 0 or rel >= nb:
        return -1
    hop = _unpack_h(buf, (rel >> 2) * GROUP_BYTES + HOPS_AT + 2 * (rel & 3))[0]
    i = 0
    while hop and i < hsize:
        if hop & 1:
            b = rel + i
            if b >= nb:
                break
            base = (b >> 2) * GROUP_BYTES
            if _unpack_q(buf, base + KEYS_AT + 8 * (b & 3))[0] == key:
                return _unpack_i(buf, base + VALUES_AT + 4 * (b & 3))[0]
        hop >>= 1
        i += 1
    return -1


def any_locked(buf):
    for off in range(0, len(buf) - GROUP_BYTES + 1, GROUP_BYTES):
        if _unpack_q(buf, off)[0]:
            return True
    return False


def _mix_np(x):
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def check_table(buf, total_buckets, mask, hsize):
    groups = np.frombuffer(bytes(buf[: (total_buckets // 4) * GROUP_BYTES]), dtype=np.uint8)
    groups = groups.reshape(-1, GROUP_BYTES)
    keys = groups[:, KEYS_AT:VALUES_AT].copy().view("<u8").reshape(-1)
    hops = groups[:, HOPS_AT:].copy().view("<u2").reshape(-1).astype(np.int64)
    idx = np.arange(total_buckets, dtype=np.int64)
    with np.errstate(over="ignore"):
        homes = (_mix_np(keys) & np.uint64(mask)).astype(np.int64)
    occ = keys != 0
    dist = idx - homes
    bad = occ & ((dist < 0) | (dist >= hsize))
    if bad.any():
        b = int(np.flatnonzero(bad)[0])
        return "bucket %d holds key homing at %d" % (b, int(homes[b]))
    expected = np.zeros(total_buckets, dtype=np.int64)
    np.bitwise_or.at(expected, homes[occ], np.left_shift(1, dist[occ]))
    diff = np.flatnonzero(expected != hops)
    if diff.size:
        h = int(diff[0])
        return "hop_info of bucket %d is %#x, residents imply %#x" % (
            h, int(hops[h]), int(expected[h]))
    return None
