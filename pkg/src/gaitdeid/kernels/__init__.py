"""Hot kernels: compiled when the extension is built, numpy otherwise.

``BACKEND`` names the implementation picked at import. ``use_backend`` swaps
it at runtime (tests and the benchmark compare both).
"""
from . import _fallback

try:
    from . import _native
except ImportError:  # extension not built
    _native = None

_IMPLS = {"python": _fallback}
if _native is not None:
    _IMPLS["native"] = _native

BACKEND = "native" if _native is not None else "python"
_impl = _IMPLS[BACKEND]

MASS_GUARD = _fallback.MASS_GUARD
N_MOMENTS = _fallback.N_MOMENTS


def available_backends():
    return sorted(_IMPLS)


def use_backend(name):
    global BACKEND, _impl
    if name not in _IMPLS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    BACKEND = name
    _impl = _IMPLS[name]


def frame_moments(x):
    return _impl.frame_moments(x)


def frame_moments_grad(x, g):
    return _impl.frame_moments_grad(x, g)


def contour_mask(x):
    return _impl.contour_mask(x)
