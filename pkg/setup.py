import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# Tuned for the build machine by default; TTOREG_PORTABLE=1 builds a generic binary.
flags = ["-O3"]
if os.environ.get("TTOREG_PORTABLE") != "1":
    flags += ["-march=native", "-mprefer-vector-width=512"]

extensions = [
    Extension(
        "ttoreg.kernels._ckernels",
        ["src/ttoreg/kernels/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=flags,
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
