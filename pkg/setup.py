"""Build script: compiles the optional Cython kernel core.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only costs speed, not functionality.
"""

import numpy as np
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "marlab.kernels._core",
                ["src/marlab/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
