import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "longimix.kernels._compiled",
                ["src/longimix/kernels/_compiled.pyx"],
                include_dirs=[np.get_include()],
                # fp-contract off: the compiled kernel must match the numpy
                # fallback bit-for-bit, so no FMA contraction.
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    # No Cython available: install the pure-numpy fallback only.
    extensions = []

setup(ext_modules=extensions)
