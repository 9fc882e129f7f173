"""Minimal dense-tensor engine with reverse-mode automatic differentiation."""
from .gradcheck import analytic_grads, check_gradients, finite_diff_grad, relative_error
from .ops import (
    add, batch_norm3d, conv3d, conv3d_reference, conv_output_size, drop_path, gelu,
    layer_norm, linear, matmul, mean_over_axes, mul, reshape, scale, softmax, sub,
    transpose_axes,
)
from .ops import sum as sum_  # noqa: F401
from .serialize import read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor
from .tensor import MacCounter, Tape, Tensor, backward

__all__ = [
    "Tensor", "Tape", "backward", "MacCounter",
    "add", "sub", "mul", "scale", "matmul", "linear", "conv3d", "conv3d_reference",
    "conv_output_size", "layer_norm", "batch_norm3d", "softmax", "gelu", "drop_path",
    "mean_over_axes", "reshape", "transpose_axes", "sum_",
    "finite_diff_grad", "analytic_grads", "check_gradients", "relative_error",
    "write_tensor", "read_tensor", "tensor_to_bytes", "tensor_from_bytes",
]
