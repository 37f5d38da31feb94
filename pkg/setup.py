"""Build script: compiles the optional Cython QP core.

The package works without the extension (a pure-numpy solver is used as
fallback), so any compilation failure is non-fatal.
"""
import numpy as np
from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/reachtraj/qp/_core.pyx",
        compiler_directives={"language_level": "3", "boundscheck": False,
                             "wraparound": False, "cdivision": True},
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"Cython core skipped: {exc}")

setup(ext_modules=ext_modules, include_dirs=[np.get_include()])
