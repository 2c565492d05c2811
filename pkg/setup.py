from Cython.Build import cythonize
from setuptools import Extension, setup

setup(
    ext_modules=cythonize(
        [Extension("curvrace._kernels", ["src/curvrace/_kernels.pyx"])],
        compiler_directives={"language_level": "3"},
    ),
)
