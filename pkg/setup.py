"""Build the optional compiled kernels.

The package works without them: ``pilotwave.kernels`` falls back to the
NumPy implementation when the extension is missing.  Set
``PILOTWAVE_NO_EXT=1`` to skip the build entirely.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("PILOTWAVE_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "pilotwave.kernels._ckernels",
                    ["src/pilotwave/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O2", "-fopenmp", "-fno-fast-math", "-ffp-contract=off"],
                    extra_link_args=["-fopenmp"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
