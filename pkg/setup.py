import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("HYBRID_ASR_PURE", "") in ("", "0"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "hybrid_asr.kernels._dwconv",
                    ["src/hybrid_asr/kernels/_dwconv.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # contraction into FMA would break bit-equality with the numpy path
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
