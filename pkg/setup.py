"""Builds the optional Cython kernels; the package works without them."""
import numpy as np
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("dgflow._ckernels", ["src/dgflow/_ckernels.pyx"],
                   include_dirs=[np.get_include()], extra_compile_args=["-O3"],
                   optional=True)],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
