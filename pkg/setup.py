"""Build the optional Cython kernels.

If Cython or a C compiler is missing the package still installs and falls
back to the numpy kernels in ``cimtrain._kernels_py``.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "cimtrain._ckernels",
                ["src/cimtrain/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no -ffast-math: results must match the numpy fallback bit for bit
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
