# Builds the optional compiled kernel core. If Cython or a C compiler is
# unavailable the install falls back to the pure-numpy kernels.
import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the extension if possible, otherwise install pure-Python."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: compiled kernels skipped ({exc}); "
                  "using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: building {ext.name} failed ({exc}); "
                  "using numpy fallback")


ext = Extension(
    "salmask._kernels._core",
    sources=["src/salmask/_kernels/_core.pyx"],
    include_dirs=[numpy.get_include()],
    # -ffp-contract=off keeps float accumulation bit-identical to the
    # numpy fallback (no fused multiply-add).
    extra_compile_args=["-O3", "-ffp-contract=off"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

try:
    from Cython.Build import cythonize
    ext_modules = cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules, cmdclass={"build_ext": optional_build_ext})
