from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    LayerGrads,
    ShapeError,
    batchnorm2d,
    batchnorm2d_backward,
    bce_with_sigmoid,
    concat_channels,
    concat_channels_backward,
    conv2d,
    conv2d_backward,
    maxpool2x2,
    maxpool2x2_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    transposed_conv2d,
    transposed_conv2d_backward,
)
from .adam import Adam, AdamState, adam_step

__all__ = [
    "BN_EPS", "BN_MOMENTUM", "LayerGrads", "ShapeError",
    "batchnorm2d", "batchnorm2d_backward", "bce_with_sigmoid",
    "concat_channels", "concat_channels_backward",
    "conv2d", "conv2d_backward", "maxpool2x2", "maxpool2x2_backward",
    "relu", "relu_backward", "sigmoid", "sigmoid_backward",
    "transposed_conv2d", "transposed_conv2d_backward",
    "Adam", "AdamState", "adam_step",
]
