"""Build script for the compiled kernel extension.

The extension is optional: if it cannot be compiled the package still
installs and falls back to the pure-numpy reference backend at import time.
Set STEREODET3D_NO_OPENMP=1 to build without OpenMP support.
"""

import os

from Cython.Build import cythonize
from setuptools import Extension, setup

compile_args = ["-O3"]
link_args = []
if not os.environ.get("STEREODET3D_NO_OPENMP"):
    compile_args.append("-fopenmp")
    link_args.append("-fopenmp")

extension = Extension(
    "stereodet3d.backend._kernels",
    sources=["src/stereodet3d/backend/_kernels.pyx"],
    extra_compile_args=compile_args,
    extra_link_args=link_args,
    optional=True,
)

setup(ext_modules=cythonize([extension], language_level=3))
