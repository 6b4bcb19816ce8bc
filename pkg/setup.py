"""Build the optional compiled tape kernels.

The extension is optional: when Cython or a C compiler is unavailable the
package installs without it and ``pmfl.autodiff`` runs on the pure-Python
kernels.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("PMFL_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "pmfl.autodiff._kernels",
                    ["src/pmfl/autodiff/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    optional=True,
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
