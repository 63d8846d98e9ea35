"""Sparse-voxel linear group RNN backbone with multi-modal and temporal token fusion."""

from .autodiff import GradientReport, Tape, Tensor, backward, fd_check
from .backbone import BackboneConfig, backbone_forward, voxel_generate
from .config import ConfigError, RunConfig
from .fusion import (CameraModel, DepthCandidateRaster, MemoryBank, align_temporal, concat_modalities,
                     fuse_frame, lift_camera)
from .linrnn import selective_scan_chunked, selective_scan_seq, wkv_scan
from .losses import LossWeights, TaskLosses, dynamic_weight, total_loss, toy_heads
from .partition import AxisOrder, WindowShape, partition, sort_key
from .scene import SceneFrame, SceneSpec, generate_scene
from .sparse_ops import submanifold_conv3, voxel_expand, voxel_merge
from .voxel import SparseFeatureSet, VoxelGrid, canonicalize, voxelize

__version__ = "0.1.0"
