"""Hot numeric kernels with two interchangeable backends.

The numba backend (`@njit`-compiled scalar loops) is the default; the pure
numpy backend is selected with `VGFM_BACKEND=numpy`, or used automatically
when numba is not importable. Both backends implement the same functions
with identical semantics; floating-point results may differ in the last few
ulps where reduction order differs, so cross-backend tests compare at 1e-12
rather than bitwise. Within one backend all kernels are deterministic.

Kernel contract (validation happens in the callers, vgfm.core):
    bilinear_many(data, xs, ys)        -> (n, c) samples, coords pre-clamped
    roi_align_many(data, rects, bins)  -> (n, c) pooled vectors
    roi_align_scatter(h, w, c, rects, bins, grads) -> (h, w, c) adjoint
    cosine_map(data, ref)              -> (h, w) per-cell cosine, -1 on
                                          zero-norm cells
    pairwise_sqdist(x, centers)        -> (n, k) squared euclidean distances
"""

import os

_requested = os.environ.get("VGFM_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"VGFM_BACKEND={_requested!r} is not supported; use 'numba' or 'numpy'"
    )

if _requested == "numpy":
    from . import _numpy as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import _numpy as _impl

        BACKEND = "numpy"

bilinear_many = _impl.bilinear_many
roi_align_many = _impl.roi_align_many
roi_align_scatter = _impl.roi_align_scatter
cosine_map = _impl.cosine_map
pairwise_sqdist = _impl.pairwise_sqdist

__all__ = [
    "BACKEND",
    "bilinear_many",
    "roi_align_many",
    "roi_align_scatter",
    "cosine_map",
    "pairwise_sqdist",
]
