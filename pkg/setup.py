"""Builds the optional compiled kernels. Without Cython the package installs
pure-Python and ``xcae.kernels`` falls back to the numpy implementation."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("XCAE_NO_EXT", "") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("xcae._ckernels", ["src/xcae/_ckernels.pyx"],
                       include_dirs=[numpy.get_include()],
                       extra_compile_args=["-O3"],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
