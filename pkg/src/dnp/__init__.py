"""Dense neural patterns: whole-image CNN features by network convolution,
pooled in regionlets and scored by boosted cascades."""

from .geometry import NetSpec, get_net, paper_net, tiny_net
from .cnn import WeightSet, forward_to_layer, init_weights
from .dense import FeatureGrid, network_convolution, plan_tiling
from .regionlets import Rect, RegionletConfig, region_feature, sample_configurations
from .detector import Cascade, TrainParams, detect, nms, train_cascade
from .evaluation import GroundTruth, average_precision

__all__ = [
    "NetSpec", "get_net", "paper_net", "tiny_net",
    "WeightSet", "forward_to_layer", "init_weights",
    "FeatureGrid", "network_convolution", "plan_tiling",
    "Rect", "RegionletConfig", "region_feature", "sample_configurations",
    "Cascade", "TrainParams", "detect", "nms", "train_cascade",
    "GroundTruth", "average_precision",
]
__version__ = "0.1.0"
