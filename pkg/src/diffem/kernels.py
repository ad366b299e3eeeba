"""Kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set ``DIFFEM_PURE_PYTHON=1`` before import to force the fallback.
"""
import os

from diffem import _pykernels as python

compiled = None
if os.environ.get("DIFFEM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from diffem import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

backend = compiled if compiled is not None else python
BACKEND_NAME = "compiled" if compiled is not None else "python"

cholesky_batch = backend.cholesky_batch
eigh_batch = backend.eigh_batch
logsumexp_rows = backend.logsumexp_rows
