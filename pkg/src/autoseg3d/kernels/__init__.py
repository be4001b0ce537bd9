"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built; set ``AUTOSEG3D_PURE_PYTHON=1``
to force the fallback.  Callers look functions up on this module at call time,
so :func:`use` can switch backends for tests and benchmarks.
"""
import contextlib
import os

from . import _pykernels

_NAMES = (
    "conv3d_forward",
    "conv3d_grad_input",
    "conv3d_grad_weight",
    "instance_norm_forward",
    "instance_norm_backward",
    "leaky_relu_forward",
    "leaky_relu_backward",
    "warp_linear",
)

_BACKENDS = {"python": _pykernels}
try:
    from . import _ckernels

    _BACKENDS["cython"] = _ckernels
except ImportError:
    pass

BACKEND = "python"


def available():
    return sorted(_BACKENDS)


def _bind(name):
    global BACKEND
    mod = _BACKENDS[name]
    for fn in _NAMES:
        globals()[fn] = getattr(mod, fn)
    BACKEND = name


@contextlib.contextmanager
def use(name):
    """Temporarily route every kernel call through backend ``name``."""
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} is not available (have {available()})")
    previous = BACKEND
    _bind(name)
    try:
        yield
    finally:
        _bind(previous)


if "cython" in _BACKENDS and os.environ.get("AUTOSEG3D_PURE_PYTHON") != "1":
    _bind("cython")
else:
    _bind("python")
