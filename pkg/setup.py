"""Builds the optional Cython featurizer kernel.

The package works without it: ``routesql.router._kernels`` falls back to the
pure-Python implementation when the extension is not importable.
"""
import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("ROUTESQL_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "routesql.router._hashing",
                ["src/routesql/router/_hashing.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
