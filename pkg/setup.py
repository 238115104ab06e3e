"""Builds the optional compiled kernels.

The package is fully functional without the extension (a NumPy fallback is
selected at import time); set REATTN_PURE_PYTHON=1 to skip compilation.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("REATTN_PURE_PYTHON") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "reattn._kernels",
                    ["src/reattn/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # No Cython/NumPy at build time: install pure, the fallback kicks in.
        ext_modules = []

setup(ext_modules=ext_modules)
