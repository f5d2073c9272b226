import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "tacrecon._kernels",
        ["src/tacrecon/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

# The extension is optional: tacrecon falls back to numpy kernels when it is
# missing, so a failed compile must not break the install.
try:
    ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})
except Exception as exc:  # pragma: no cover - build environment without Cython
    print(f"warning: not building tacrecon._kernels ({exc}); using the numpy fallback")
    ext_modules = []

setup(ext_modules=ext_modules)
