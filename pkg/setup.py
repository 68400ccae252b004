"""Build the optional compiled kernels.

The extension is optional: if Cython or a C compiler is missing the package
installs without it and ``latentsde._backend`` falls back to numpy.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("LATENTSDE_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "latentsde._kernels",
                    ["src/latentsde/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    libraries=["m"],
                    # no FMA contraction: keeps results close to the numpy path
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
