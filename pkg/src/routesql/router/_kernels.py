"""Selects the compiled hashing kernel when it was built, else the Python one.

Set ``ROUTESQL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _hashing_py

if os.environ.get("ROUTESQL_PURE_PYTHON"):
    hash_ngrams = _hashing_py.hash_ngrams
    BACKEND = "python"
else:
    try:
        from ._hashing import hash_ngrams  # type: ignore[import-not-found]

        BACKEND = "cython"
    except ImportError:
        hash_ngrams = _hashing_py.hash_ngrams
        BACKEND = "python"

__all__ = ["hash_ngrams", "BACKEND"]
