from .nn import Conv2d, ConvTranspose2d, Dense, Module, ModuleList, Parameter
from .ops import (
    ShapeError,
    abs,
    add,
    concat,
    concat_channels,
    conv2d,
    conv2d_transpose,
    conv2d_transpose_nhwc,
    conv2d_nhwc,
    crop,
    dense,
    leaky_relu,
    mean,
    mish,
    mul,
    nearest_upsample,
    nearest_upsample_nhwc,
    permute,
    reshape,
    square,
    sub,
    sum,
    to_nchw,
    to_nhwc,
)
from .optim import NonFiniteGradientError, adam_step, clip_grad_norm, global_grad_norm
from .rng import Rng
from .tensor import (
    NonFiniteError,
    Tensor,
    as_tensor,
    backward,
    debug_checks,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
)
