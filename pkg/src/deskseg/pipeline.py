"""End-to-end inference bundle: voxelize -> detect -> refine -> masks."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .detector import Detector, decode_proposals
from .refiner import RefinerConfig, TinyUNet, predict_masks
from .voxels import SparseGrid, voxelize


@dataclass
class DecodeSettings:
    score_threshold: float = 0.02
    nms_iou: float = 0.35
    max_proposals: int = 60
    pre_nms_limit: int | None = 512


class Pipeline:
    """Holds the trained modules plus the knobs shared across commands."""

    def __init__(self, detector: Detector, refiner: TinyUNet | None,
                 refiner_config: RefinerConfig, voxel_size: float,
                 decode: DecodeSettings | None = None):
        self.detector = detector
        self.refiner = refiner
        self.refiner_config = refiner_config
        self.voxel_size = float(voxel_size)
        self.decode = decode or DecodeSettings()

    @staticmethod
    def build(num_classes: int, voxel_size: float = 0.05,
              widths=(32, 64, 128, 256), decoder_width: int = 32,
              head_levels=(1, 2, 3), refiner_config: RefinerConfig | None = None,
              decode: DecodeSettings | None = None, seed: int = 0,
              dtype=torch.float32) -> "Pipeline":
        refiner_config = refiner_config or RefinerConfig()
        torch.manual_seed(seed)
        detector = Detector(num_classes=num_classes, widths=widths,
                            decoder_width=decoder_width, head_levels=head_levels,
                            voxel_size=voxel_size, dtype=dtype)
        refiner = None
        if refiner_config.levels > 0:
            refiner = TinyUNet(in_channels=decoder_width, config=refiner_config,
                               dtype=dtype)
        return Pipeline(detector, refiner, refiner_config, voxel_size, decode)

    def with_decode(self, **kwargs) -> "Pipeline":
        return Pipeline(self.detector, self.refiner, self.refiner_config,
                        self.voxel_size, replace(self.decode, **kwargs))

    def with_refiner(self, refiner: TinyUNet | None,
                     refiner_config: RefinerConfig) -> "Pipeline":
        return Pipeline(self.detector, refiner, refiner_config,
                        self.voxel_size, self.decode)

    def infer(self, cloud, grid: SparseGrid | None = None):
        """Full inference on one scene; returns (grid, proposals, masks)."""
        if grid is None:
            grid = voxelize(cloud, self.voxel_size)
        self.detector.eval()
        if self.refiner is not None:
            self.refiner.eval()
        with torch.no_grad():
            bb, head_outs = self.detector.forward_grid(grid)
            proposals = decode_proposals(
                head_outs, self.voxel_size,
                score_threshold=self.decode.score_threshold,
                nms_iou=self.decode.nms_iou,
                max_proposals=self.decode.max_proposals,
                pre_nms_limit=self.decode.pre_nms_limit)
            roi_features = bb.roi_features.features.numpy()
            masks = predict_masks(grid, proposals, self.refiner_config,
                                  self.refiner, roi_features=roi_features)
        return grid, proposals, masks

    def infer_masks(self, cloud) -> list:
        return self.infer(cloud)[2]

    def __call__(self, cloud) -> list:
        return self.infer_masks(cloud)

    def parameters(self):
        params = list(self.detector.parameters())
        if self.refiner is not None:
            params += list(self.refiner.parameters())
        return params

    def named_parameters(self):
        out = [("detector." + n, p) for n, p in self.detector.named_parameters()]
        if self.refiner is not None:
            out += [("refiner." + n, p) for n, p in self.refiner.named_parameters()]
        return out
