import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "progsfm.kernels._ext",
                ["src/progsfm/kernels/_ext.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    # Pure-python kernels are selected at import time when the extension
    # is missing, so the package stays installable without Cython.
    ext_modules = []

setup(ext_modules=ext_modules)
