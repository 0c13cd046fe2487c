"""Pick the compiled kernels when available, else the pure-Python ones.

Set ``PREDCODE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
kernels = _pykernels

if not os.environ.get("PREDCODE_PURE_PYTHON"):
    try:
        from . import _ckernels as kernels  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        kernels = _pykernels

im2col3x3 = kernels.im2col3x3
col2im3x3 = kernels.col2im3x3
encode_symbols = kernels.encode_symbols
decode_symbols = kernels.decode_symbols
gap_predict_image = kernels.gap_predict_image
gap_reconstruct = kernels.gap_reconstruct
fnv1a64 = kernels.fnv1a64
bn_train_forward = kernels.bn_train_forward
bn_train_backward = kernels.bn_train_backward
leaky_relu_forward = kernels.leaky_relu_forward
leaky_relu_backward = kernels.leaky_relu_backward
column_sums = kernels.column_sums
