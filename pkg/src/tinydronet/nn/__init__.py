"""Reference float inference and training kernels."""
from .checkpoint import load_checkpoint, save_checkpoint
from .kernels import (
    ShapeError, batchnorm, batchnorm_backward, conv2d, conv2d_backward, depthwise_backward,
    depthwise_conv2d, fully_connected, fully_connected_backward, maxpool2d, maxpool2d_backward,
    pointwise_backward, pointwise_conv2d, relu6, relu6_backward, sigmoid,
)
from .network import (
    ForwardTrace, Params, apply_layer, copy_params, forward_features, init_params, model_backward,
    model_forward, trainable_keys, zero_params,
)
