"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports cleanly; setting the
environment variable ``TTOREG_PURE_PYTHON=1`` forces the fallback.
:func:`use_backend` switches at runtime (used by the kernel benchmark and by
the cross-backend tests).
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_NAMES = (
    "conv3d_forward",
    "conv3d_backward_weight",
    "conv3d_backward_input",
    "sample_forward",
    "sample_backward",
)

BACKEND = None


def available_backends():
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def use_backend(name):
    """Bind the module-level kernel functions to ``"compiled"`` or ``"python"``."""
    global BACKEND
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        impl = _ckernels
    elif name == "python":
        impl = _pykernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    g = globals()
    for fn in _NAMES:
        g[fn] = getattr(impl, fn)
    BACKEND = name


if _ckernels is not None and os.environ.get("TTOREG_PURE_PYTHON", "") not in ("1", "true"):
    use_backend("compiled")
else:
    use_backend("python")
