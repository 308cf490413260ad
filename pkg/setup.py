"""Build the optional compiled leapfrog kernels; the package works without them."""
from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("carleman_lab._kernels", ["src/carleman_lab/_kernels.pyx"],
                   include_dirs=[numpy.get_include()], extra_compile_args=["-O3"],
                   optional=True)],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
