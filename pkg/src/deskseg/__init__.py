"""Desk-scale top-down 3D instance segmentation.

Two-stage pipeline over sparse voxel grids: a fully-convolutional detector
proposes axis-aligned boxes, an RoI extractor collects the voxels inside
each box, and a tiny U-Net refines them into per-point instance masks. Ships
with a synthetic scene generator, ScanNet-style AP evaluation, and a CLI for
reproducible experiments.
"""

from .config import RunConfig, load_config
from .detector import (Detector, Proposal, assign_targets, decode_proposals,
                       focal_loss, iou_loss)
from .errors import (CheckpointError, ConfigError, DataError, DesksegError,
                     NumericError, SceneInfeasibleError, SceneParseError)
from .geometry import Box3D, box_iou
from .metrics import MetricsReport, benchmark, evaluate, mask_iou
from .pipeline import DecodeSettings, Pipeline
from .refiner import (InstanceMask, MatchResult, RefinerConfig, TinyUNet,
                      match_for_training, predict_masks, seg_loss, unet_forward)
from .scene import (PointCloud, SceneConfig, generate_scene, read_boxes,
                    read_scene, write_boxes, write_scene)
from .trainer import (LossBreakdown, SceneRecord, TrainConfig, fit,
                      load_checkpoint, save_checkpoint, train_step)
from .voxels import RoI, SparseGrid, devoxelize_mask, extract_roi, voxel_center, voxelize

__version__ = "0.1.0"
