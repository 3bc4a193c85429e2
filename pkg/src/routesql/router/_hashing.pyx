# cython: language_level=3
"""FNV-1a n-gram hashing, compiled.

Must stay bit-identical with ``_hashing_py.hash_ngrams``.
"""
import numpy as np
from libc.stdint cimport int64_t, uint64_t

cdef uint64_t FNV_OFFSET = 14695981039346656037ULL
cdef uint64_t FNV_PRIME = 1099511628211ULL


cdef inline uint64_t _feed(uint64_t h, const unsigned char[:] data) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h = (h ^ data[i]) * FNV_PRIME
    return h


def hash_ngrams(list tokens, Py_ssize_t dim, uint64_t seed=0):
    """Bucket ids of all unigrams then all bigrams (``"a b"``) of ``tokens``."""
    cdef Py_ssize_t n = len(tokens)
    cdef Py_ssize_t n_out = n + (n - 1 if n > 1 else 0)
    result = np.empty(n_out, dtype=np.int64)
    cdef int64_t[:] out = result
    cdef list encoded = [t.encode("utf-8") for t in tokens]
    cdef uint64_t base = FNV_OFFSET ^ seed
    cdef uint64_t h
    cdef const unsigned char[:] a
    cdef const unsigned char[:] b
    cdef unsigned char space = 32
    cdef Py_ssize_t i
    for i in range(n):
        a = encoded[i]
        out[i] = <int64_t>(_feed(base, a) % <uint64_t>dim)
    for i in range(n - 1):
        a = encoded[i]
        b = encoded[i + 1]
        h = _feed(base, a)
        h = (h ^ space) * FNV_PRIME
        h = _feed(h, b)
        out[n + i] = <int64_t>(h % <uint64_t>dim)
    return result
