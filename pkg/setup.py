"""Build the optional Cython GRU kernel; the package works without it."""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("RATLAB_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("ratlab._gru_ext", ["src/ratlab/_gru_ext.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
