import os

from setuptools import setup

ext_modules = []
if os.environ.get("IDF_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        print("Cython/numpy unavailable: installing the pure-Python kernels only")
    else:
        ext_modules = cythonize(
            [Extension(
                "idf.core._ckernels",
                ["src/idf/core/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
