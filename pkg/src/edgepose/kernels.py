"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementations in ``_pykernels`` are used. Setting the environment
variable ``EDGEPOSE_PURE_PYTHON=1`` forces the fallback. ``use_backend`` swaps
implementations at runtime (tests and the benchmark use it).
"""

from __future__ import annotations

import os

from edgepose import _pykernels

try:
    from edgepose import _ckernels
except ImportError:
    _ckernels = None

__all__ = ["BACKEND", "available_backends", "use_backend", "weighted_dlt", "render_gaussian", "peak_covariance", "fuse"]

_IMPLS = {"python": _pykernels}
if _ckernels is not None:
    _IMPLS["cython"] = _ckernels

BACKEND = ""


def available_backends() -> list[str]:
    return sorted(_IMPLS)


def use_backend(name: str) -> None:
    global BACKEND, weighted_dlt, render_gaussian, peak_covariance, fuse
    try:
        impl = _IMPLS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available_backends()}") from None
    weighted_dlt = impl.weighted_dlt
    render_gaussian = impl.render_gaussian
    peak_covariance = impl.peak_covariance
    fuse = impl.fuse
    BACKEND = name


weighted_dlt = _pykernels.weighted_dlt
render_gaussian = _pykernels.render_gaussian
peak_covariance = _pykernels.peak_covariance
fuse = _pykernels.fuse

if _ckernels is not None and not os.environ.get("EDGEPOSE_PURE_PYTHON"):
    use_backend("cython")
else:
    use_backend("python")
