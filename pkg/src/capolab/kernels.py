"""Kernel backend selection.

The compiled extension is used when it imports; set ``CAPOLAB_PURE_PYTHON=1``
to force the numpy fallback. Both backends expose ``forward``, ``backward``
and ``gae`` with identical signatures.
"""
import os

from capolab import _pykernels as python_backend

compiled_backend = None
if not os.environ.get("CAPOLAB_PURE_PYTHON"):
    try:
        from capolab import _ext as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

forward = backend.forward
backward = backend.backward
gae = backend.gae
