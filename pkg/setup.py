import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the numpy fallback in moesimvae.kernels covers this case
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "moesimvae._ckernels",
                ["src/moesimvae/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
