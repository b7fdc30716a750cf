"""Select the compiled kernels when available, else the numpy fallback.

Set ``GAPROMPT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py as python_kernels

try:
    from . import _kernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and os.environ.get("GAPROMPT_PURE_PYTHON") != "1":
    kernels = compiled_kernels
    BACKEND = "cython"
else:
    kernels = python_kernels
    BACKEND = "python"
