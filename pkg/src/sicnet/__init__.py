"""Efficient convolutional layer designs with exact gradients, an analytical
multiplication-count engine, a reference model zoo, and a desk-scale training
harness."""

__version__ = "0.1.0"

from .basic import (
    BatchNormState,
    avg_pool,
    batchnorm_backward,
    batchnorm_forward,
    dropout,
    fully_connected,
    max_pool,
    softmax,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
)
from .blocks import (
    ChannelBottleneckParams,
    SicIteration,
    UnraveledKernel,
    channelwise_bottleneck_backward,
    channelwise_bottleneck_block,
    sic_layer_backward,
    sic_layer_forward,
    spatial_bottleneck_backward,
    spatial_bottleneck_forward,
    unraveled_conv,
    unraveled_conv_backward,
)
from .complexity import ComplexityReport, model_report
from .conv import ConvKernel, conv_standard, conv_standard_backward, grouped_conv
from .data import Dataset, load_dataset, save_dataset, synthetic_blobs
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import gradcheck_model, gradcheck_op
from .intra import (
    IntraChannelKernel,
    ProjectionMatrix,
    intra_channel_conv,
    intra_channel_deconv,
    linear_projection,
)
from .models import LayerSpec, ModelSpec, StageSpec, builtin_specs, get_spec, load_spec, save_spec
from .network import Network, build_model
from .tensor import Shape4, Tensor4, add, crop, pad, relu, scale, zero_pad
from .topology import TopoKernel, TopologyConfig, channel_to_coords, coords_to_channel, topo_conv, topo_mask
from .train import TrainConfig, evaluate, sgd_step, train
