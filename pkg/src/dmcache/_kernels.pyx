# Compiled hot paths: key hashing, neighborhood scans over raw bucket groups,
# and the full-table invariant check. Must stay bit-compatible with
# _kernels_py.py.
from libc.stdint cimport uint8_t, uint16_t, uint32_t, uint64_t
from libc.string cimport memcpy

cdef int GROUP_BYTES = 64
cdef int KEYS_AT = 8
cdef int VALUES_AT = 40
cdef int HOPS_AT = 56


cdef inline uint64_t _mix(uint64_t x) nogil:
    x = (x ^ (x >> 30)) * <uint64_t>0xbf58476d1ce4e5b9
    x = (x ^ (x >> 27)) * <uint64_t>0x94d049bb133111eb
    return x ^ (x >> 31)


cdef inline uint64_t _key_at(const uint8_t[:] buf, Py_ssize_t b) nogil:
    cdef uint64_t k
    memcpy(&k, &buf[(b >> 2) * GROUP_BYTES + KEYS_AT + 8 * (b & 3)], 8)
    return k


cdef inline uint32_t _value_at(const uint8_t[:] buf, Py_ssize_t b) nogil:
    cdef uint32_t v
    memcpy(&v, &buf[(b >> 2) * GROUP_BYTES + VALUES_AT + 4 * (b & 3)], 4)
    return v


cdef inline uint16_t _hop_at(const uint8_t[:] buf, Py_ssize_t b) nogil:
    cdef uint16_t h
    memcpy(&h, &buf[(b >> 2) * GROUP_BYTES + HOPS_AT + 2 * (b & 3)], 2)
    return h


def mix64(uint64_t x):
    return _mix(x)


def home_bucket(uint64_t key, uint64_t mask):
    return _mix(key) & mask


def scan_neighborhood(const uint8_t[:] buf, Py_ssize_t first_bucket,
                      Py_ssize_t home, uint64_t key, int hsize):
    """Value stored for ``key`` in ``home``'s neighborhood, or -1.

    ``buf`` holds whole groups; ``first_bucket`` is the absolute index of
    its first bucket (a multiple of four).
    """
    cdef Py_ssize_t rel = home - first_bucket
    cdef Py_ssize_t nb = (buf.shape[0] // GROUP_BYTES) * 4
    cdef uint16_t hop
    cdef int i
    if rel < 0 or rel >= nb:
        return -1
    hop = _hop_at(buf, rel)
    for i in range(hsize):
        if (hop >> i) & 1 and rel + i < nb:
            if _key_at(buf, rel + i) == key:
                return _value_at(buf, rel + i)
    return -1


def any_locked(const uint8_t[:] buf):
    cdef Py_ssize_t g
    cdef uint64_t w
    for g in range(buf.shape[0] // GROUP_BYTES):
        memcpy(&w, &buf[g * GROUP_BYTES], 8)
        if w != 0:
            return True
    return False


def check_table(const uint8_t[:] buf, Py_ssize_t total_buckets,
                uint64_t mask, int hsize):
    """Return None if neighborhood and hop_info invariants hold, else a
    description of the first violation."""
    cdef Py_ssize_t b, h, i
    cdef uint64_t k
    cdef uint16_t hop
    for b in range(total_buckets):
        k = _key_at(buf, b)
        if k != 0:
            h = <Py_ssize_t>(_mix(k) & mask)
            if b - h < 0 or b - h >= hsize:
                return "bucket %d holds key homing at %d" % (b, h)
            if not ((_hop_at(buf, h) >> (b - h)) & 1):
                return "hop bit %d of bucket %d clear for resident key" % (b - h, h)
    for h in range(total_buckets):
        hop = _hop_at(buf, h)
        for i in range(hsize):
            if (hop >> i) & 1:
                if h + i >= total_buckets:
                    return "hop bit %d of bucket %d past table end" % (i, h)
                k = _key_at(buf, h + i)
                if k == 0 or <Py_ssize_t>(_mix(k) & mask) != h:
                    return "hop bit %d of bucket %d set without matching key" % (i, h)
    return None
