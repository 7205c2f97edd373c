import os

from setuptools import Extension, setup

# The hash kernel compiles against OpenSSL's libcrypto. Set CRISP_PURE_PYTHON=1
# to skip the extension entirely; the package falls back to the hashlib kernel.
ext_modules = []
if os.environ.get("CRISP_PURE_PYTHON") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "crisp.merkle._core",
                    ["src/crisp/merkle/_core.pyx"],
                    libraries=["crypto"],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level="3",
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
