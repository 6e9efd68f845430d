"""Minimal float32 tensor kernel with a reverse-mode tape."""

from .core import Tape, Tensor, active_tape, as_tensor, no_tape
from .gradcheck import grad_check
from .io import from_bytes, read_tensor, to_bytes, write_tensor
from .ops import (
    add, attention_core, avg_pool2, bce, broadcast_mul_spatialmap, combined_loss,
    concat_channels, conv2d, conv2d_grads, conv2d_raw, losses, mean, mul, relu, reshape,
    scale, sigmoid, sigmoid_raw, soft_dice, softmax_rows, sub, sum_squares, upsample_nearest,
)
