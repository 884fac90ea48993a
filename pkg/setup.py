import numpy as np
from setuptools import setup

try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("chainexit._ckernels", ["src/chainexit/_ckernels.pyx"],
                   include_dirs=[np.get_include()], extra_compile_args=["-O3"],
                   optional=True)],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
