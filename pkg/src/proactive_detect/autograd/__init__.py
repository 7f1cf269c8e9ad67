"""Minimal reverse-mode autodiff over numpy arrays."""
from .gradcheck import GradCheckReport, grad_check, relative_error
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, Linear, Module
from .optim import OptimizerKind, OptimizerSpec, optimizer_step
from .tensor import (
    OP_COUNTS,
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    avg_pool2,
    batch_norm,
    bce_with_logits,
    broadcast_channels,
    conv2d,
    dot,
    l2_norm,
    log_softmax,
    matmul,
    relu,
    reset_op_counts,
    sigmoid,
    spatial_mean,
    upsample2,
)
