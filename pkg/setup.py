from setuptools import Extension, setup
from Cython.Build import cythonize

setup(
    ext_modules=cythonize(
        [
            Extension(
                "elastica._core._simcore",
                ["src/elastica/_core/_simcore.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
)
