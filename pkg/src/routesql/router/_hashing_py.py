"""Pure-Python twin of the compiled FNV-1a n-gram hasher."""
import numpy as np

FNV_OFFSET = 14695981039346656037
FNV_PRIME = 1099511628211
MASK = (1 << 64) - 1


def _feed(h: int, data: bytes) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK
    return h


def hash_ngrams(tokens: list, dim: int, seed: int = 0) -> np.ndarray:
    """Bucket ids of all unigrams then all bigrams (``"a b"``) of ``tokens``."""
    base = FNV_OFFSET ^ (seed & MASK)
    encoded = [t.encode("utf-8") for t in tokens]
    out = [_feed(base, a) % dim for a in encoded]
    out += [_feed(_feed(base, a + b" "), b) % dim for a, b in zip(encoded, encoded[1:])]
    return np.asarray(out, dtype=np.int64)
