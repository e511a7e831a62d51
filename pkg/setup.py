import os

from setuptools import setup

ext_modules = []
if not os.environ.get("DCSS_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("dcss.kernels._ckernels", ["src/dcss/kernels/_ckernels.pyx"],
                       include_dirs=[np.get_include()],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            language_level=3,
        )
    except ImportError:
        # numpy fallback in dcss.kernels takes over
        ext_modules = []

setup(ext_modules=ext_modules)
