from setuptools import Extension, setup

import numpy as np

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python fallback is selected at import time
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "edgepose._ckernels",
                ["src/edgepose/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level="3",
    )

setup(ext_modules=ext_modules)
