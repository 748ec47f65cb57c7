# Builds the optional compiled ray-march core. The package works without it
# (a numpy fallback is selected at import time), so a failed extension build
# is tolerated rather than fatal.
import numpy
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "promptnerf._raymarch",
                ["src/promptnerf/_raymarch.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
