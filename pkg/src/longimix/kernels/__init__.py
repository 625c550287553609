"""Voxel-level hot kernels with backend selection at import time.

The compiled Cython extension is used when it was built; otherwise the
numpy implementation takes over transparently.  Set ``LONGIMIX_BACKEND`` to
``numpy`` to force the fallback or to ``compiled`` to fail loudly when the
extension is missing.  Both backends produce bit-identical results;
``BACKEND`` names the one in use.
"""

import os

from . import _numpy

displacement_gradient = _numpy.displacement_gradient

_requested = os.environ.get("LONGIMIX_BACKEND", "").strip().lower()

if _requested == "numpy":
    jacobian_det_field = _numpy.jacobian_det_field
    BACKEND = "numpy"
elif _requested in ("", "compiled"):
    try:
        from . import _compiled
    except ImportError:
        if _requested == "compiled":
            raise
        jacobian_det_field = _numpy.jacobian_det_field
        BACKEND = "numpy"
    else:
        jacobian_det_field = _compiled.jacobian_det_field
        BACKEND = "compiled"
else:
    raise ImportError(f"LONGIMIX_BACKEND must be 'numpy' or 'compiled', got {_requested!r}")
