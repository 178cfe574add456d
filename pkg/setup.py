"""Build script for the optional Cython splatting kernel.

The compiled kernel is a drop-in replacement for the pure-NumPy compositing
loop in ``lumafeat._splat_np``; if the extension fails to build (no compiler,
no Cython) the package still installs and falls back to NumPy at import time.
"""

import warnings

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if possible, warn and continue otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - depends on toolchain
            warnings.warn(f"Cython splat kernel not built ({exc}); "
                          "falling back to the NumPy backend.")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - depends on toolchain
            warnings.warn(f"{ext.name} failed to compile ({exc}); "
                          "falling back to the NumPy backend.")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover - build-time guard
        return []
    from setuptools import Extension

    ext = Extension(
        "lumafeat._splat_cy",
        sources=["src/lumafeat/_splat_cy.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": 3})


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": OptionalBuildExt},
)
