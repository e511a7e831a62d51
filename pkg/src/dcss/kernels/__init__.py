"""Inference kernels: compiled extension when built, numpy fallback otherwise.

Set ``DCSS_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("DCSS_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

select_rows = _impl.select_rows
aggregate_labels = _impl.aggregate_labels
confusion = _impl.confusion

__all__ = ["BACKEND", "select_rows", "aggregate_labels", "confusion"]
