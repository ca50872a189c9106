"""Dense optical flow from a learned patch embedding.

Frames are downsampled by three, embedded with a small convolutional
network, compared over a full 2D displacement range, regularized with
semi-global matching over 2D labels, pruned by a forward/backward check and
densified at full resolution.
"""

from .costvolume import CostVolume, QuantizedCostVolume, SearchRange
from .embedder import NetworkParams, TrainSchedule, load_params, save_params, train
from .fields import FlowField
from .flowio import flow_to_color, read_flo, write_flo
from .flowsgm import SgmParams
from .metrics import EvalReport, aepe, fl_all
from .pipeline import PipelineConfig, compute_flow, estimate, load_config
from .postprocess import MatchSet, PostprocessParams

__version__ = "0.1.0"

__all__ = [
    "CostVolume", "EvalReport", "FlowField", "MatchSet", "NetworkParams", "PipelineConfig",
    "PostprocessParams", "QuantizedCostVolume", "SearchRange", "SgmParams", "TrainSchedule",
    "aepe", "compute_flow", "estimate", "fl_all", "flow_to_color", "load_config", "load_params",
    "read_flo", "save_params", "train", "write_flo",
]
