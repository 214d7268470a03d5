"""Kernel lane selection.

The compiled Cython lane (``_core``) is used when it is importable; the
pure numpy lane (``_ref``) is the always-available fallback and the
reference the compiled lane is tested against. Set ``POINTRENDER_KERNELS``
to ``ref`` or ``c`` to force a lane; forcing ``c`` without the built
extension is an error. Both lanes share the occlusion-weight recurrence
from ``_ref`` (it is numpy-vector bound either way).
"""

import importlib
import os

from . import _ref


def _load_compiled(choice):
    if choice == "ref":
        return None
    try:
        return importlib.import_module("pointrender.kernels._core")
    except ImportError:
        if choice == "c":
            raise ImportError(
                "POINTRENDER_KERNELS=c but the compiled kernel extension is not built; "
                "install with `pip install -e . --no-build-isolation`"
            ) from None
        return None


_choice = os.environ.get("POINTRENDER_KERNELS", "").strip().lower()
_compiled = _load_compiled(_choice)
_lane = _compiled if _compiled is not None else _ref

BACKEND = _lane.BACKEND

trilinear_gather = _lane.trilinear_gather
trilinear_scatter = _lane.trilinear_scatter
trilinear_point_grad = _ref.trilinear_point_grad
scatter_add_rows = _lane.scatter_add_rows
conv3x3 = _lane.conv3x3
conv3x3_grad_input = _lane.conv3x3_grad_input
conv3x3_grad_kernel = _lane.conv3x3_grad_kernel
neus_weights_fwd = _ref.neus_weights_fwd
neus_weights_bwd = _ref.neus_weights_bwd
fps_indices = _lane.fps_indices
nearest_center = _lane.nearest_center
marching_cubes = _lane.marching_cubes
