"""Build script: compiles the optional Cython kernel core.

The package works without the extension (numpy fallback is selected at
import time); a failed compile therefore only disables the fast path.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/flowedit/_kernels/_cykernels.pyx",
        compiler_directives={"language_level": "3"},
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
        ext.extra_compile_args = ["-O3"]
except ImportError:
    pass

setup(ext_modules=ext_modules)
