"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (pure-numpy kernels are selected at
import time), so a failed compile downgrades to a warning instead of
breaking the install.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [Extension("gamin._kernels._cy_impl",
                   ["src/gamin/_kernels/_cy_impl.pyx"],
                   extra_compile_args=["-O3"])],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    sys.stderr.write(f"warning: Cython kernels not built ({exc}); "
                     "falling back to numpy kernels\n")

setup(ext_modules=ext_modules)
