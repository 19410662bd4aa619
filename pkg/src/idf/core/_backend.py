"""Pick the compiled kernels when importable, else the numpy reference.

Set ``IDF_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _reference

kernels = _reference
name = "numpy"

if os.environ.get("IDF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        name = "cython"


def use(backend):
    """Switch backend at runtime ('cython' or 'numpy'); used by tests and benchmarks."""
    global kernels, name
    if backend == "numpy":
        kernels, name = _reference, "numpy"
    elif backend == "cython":
        from . import _ckernels
        kernels, name = _ckernels, "cython"
    else:
        raise ValueError(f"unknown backend {backend!r}")


def available():
    out = ["numpy"]
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return out
    return out + ["cython"]
