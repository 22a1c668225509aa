"""Joint infrared/visible image fusion and RGB-T salient object detection.

The fusion network (FSFNet) and the detector (FGC2Net) are trained in
alternating loops; see :mod:`irfs.trainer`.
"""
from .fusion import FSFNet, FusionNetConfig, fuse_pair
from .sod import FGC2Net, SodNetConfig
from .trainer import one_stage_baseline, run_interactive_training
from .types import FusedImage, LoopSchedule, MetricReport, MultimodalSample, SaliencyOutputs

__version__ = "0.1.0"

__all__ = [
    "FGC2Net",
    "FSFNet",
    "FusedImage",
    "FusionNetConfig",
    "LoopSchedule",
    "MetricReport",
    "MultimodalSample",
    "SaliencyOutputs",
    "SodNetConfig",
    "fuse_pair",
    "one_stage_baseline",
    "run_interactive_training",
]
