"""Sequence operators: the shared block structure and its three local extractors."""

from .block import block_param_shapes, sequence_block_backward, sequence_block_forward
from .extractors import (LocalExtractInputs, gather_neighbors, gva_extract, mlp_extract,
                         neighbor_softmax, va_extract)
from .gradcheck import finite_diff_check, gradcheck
from .kernels import linear

__all__ = [
    "LocalExtractInputs", "block_param_shapes", "finite_diff_check", "gather_neighbors",
    "gradcheck", "gva_extract", "linear", "mlp_extract", "neighbor_softmax",
    "sequence_block_backward", "sequence_block_forward", "va_extract",
]
