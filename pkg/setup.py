from setuptools import Extension, setup
from Cython.Build import cythonize

# Compiled geometry/assignment kernels. The package falls back to the pure
# numpy implementation at import time if this extension is unavailable.
extensions = [
    Extension(
        "dpp.boxgeo._fastgeom",
        ["src/dpp/boxgeo/_fastgeom.pyx"],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
