"""Build script for the compiled render core.

The package is fully functional without the extension (a NumPy/SciPy
fallback is selected at import time), so a missing Cython or a failed
compile only costs speed.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "qdsound.render._core",
                ["src/qdsound/render/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
