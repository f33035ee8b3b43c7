"""Proposal refinement: a tiny sparse U-Net labeling RoI voxels as
foreground/background, plus the GT-to-proposal matching that supervises it.

With zero levels the network degenerates to a parameter-free bypass that
keeps every voxel of the proposal, so the instance mask is simply everything
inside the box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DataError, SceneParseError
from .geometry import box_iou
from .scene import PRED_MAGIC
from .sparse import DownConv3d, GridTopology, Linear1x1, SparseTensor, SubmConv3d, UpConv3d
from .voxels import RoI, SparseGrid, extract_roi, voxel_center


@dataclass
class RefinerConfig:
    levels: int = 4
    base_channels: int = 16
    iou_match_threshold: float = 0.25
    mask_threshold: float = 0.5
    gt_label_rule: str = "any"  # "any" or "majority"

    def validate(self):
        if self.levels not in (0, 1, 2, 3, 4):
            raise DataError(f"refiner levels must be in 0..4, got {self.levels}")
        if self.base_channels < 1:
            raise DataError("base_channels must be positive")
        if not (0.0 <= self.iou_match_threshold < 1.0):
            raise DataError("iou_match_threshold must lie in [0, 1)")
        if self.gt_label_rule not in ("any", "majority"):
            raise DataError(f"unknown gt_label_rule {self.gt_label_rule!r}")


@dataclass
class InstanceMask:
    """Per-point boolean membership with the proposal's class and score."""

    point_mask: np.ndarray  # (N,) bool
    class_id: int
    score: float


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)            # (gt_idx, proposal_idx, iou)
    unmatched_gt: list = field(default_factory=list)
    unmatched_proposals: list = field(default_factory=list)


def match_for_training(gt, proposals, threshold: float) -> MatchResult:
    """Greedy nearest-center matching with claiming, then IoU filtering.

    Ground truths are processed in ascending index order. Each picks the
    still-unclaimed proposal with the smallest center distance (ties to the
    lower proposal index); the pick claims the proposal either way, and the
    pair is kept only when box IoU exceeds the threshold.
    """
    if not (0.0 <= threshold < 1.0):
        raise DataError("match threshold must lie in [0, 1)")
    result = MatchResult()
    claimed = set()
    for gi, (gbox, _gcls) in enumerate(gt):
        best_pi = -1
        best_d = np.inf
        for pi, prop in enumerate(proposals):
            if pi in claimed:
                continue
            d = float(np.linalg.norm(prop.box.center - gbox.center))
            if d < best_d:
                best_d = d
                best_pi = pi
        if best_pi < 0:
            result.unmatched_gt.append(gi)
            continue
        claimed.add(best_pi)
        iou = box_iou(gbox, proposals[best_pi].box)
        if iou > threshold:
            result.pairs.append((gi, best_pi, iou))
        else:
            result.unmatched_gt.append(gi)
    matched_props = {pi for _, pi, _ in result.pairs}
    result.unmatched_proposals = [pi for pi in range(len(proposals))
                                  if pi not in matched_props]
    return result


class TinyUNet(nn.Module):
    """Sparse U-Net over RoI voxels; depth equals `levels` downsamplings.

    Input channels are the RoI's backbone features plus three channels of
    voxel-center offset normalized by the proposal box size.
    """

    def __init__(self, in_channels: int, config: RefinerConfig, dtype=torch.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.levels = config.levels
        self.dtype = dtype
        if self.levels == 0:
            return
        ch = [config.base_channels * (2 ** i) for i in range(self.levels + 1)]
        self.stem = SubmConv3d(in_channels + 3, ch[0], dtype=dtype)
        self.downs = nn.ModuleList(
            [DownConv3d(ch[i], ch[i + 1], dtype=dtype) for i in range(self.levels)])
        self.enc_convs = nn.ModuleList(
            [SubmConv3d(ch[i + 1], ch[i + 1], dtype=dtype) for i in range(self.levels)])
        self.ups = nn.ModuleList(
            [UpConv3d(ch[i + 1], ch[i], dtype=dtype) for i in range(self.levels)])
        self.dec_convs = nn.ModuleList(
            [SubmConv3d(ch[i], ch[i], dtype=dtype) for i in range(self.levels)])
        self.out = Linear1x1(ch[0], 1, dtype=dtype)

    def forward(self, topo: GridTopology, features: torch.Tensor) -> torch.Tensor:
        if self.levels == 0:
            raise DataError("level-0 refiner has no forward pass")
        x = SparseTensor(topo, features, stride=1)
        x = x.with_features(F.relu(self.stem(x).features))
        skips = [x]
        for i in range(self.levels):
            x = self.downs[i](x)
            x = x.with_features(F.relu(self.enc_convs[i](x).features))
            skips.append(x)
        for i in range(self.levels - 1, -1, -1):
            up = self.ups[i](x, skips[i].topo, skips[i].stride)
            merged = up.with_features(up.features + skips[i].features)
            x = merged.with_features(F.relu(self.dec_convs[i](merged).features))
        return self.out(x).features[:, 0]


def _roi_input(roi: RoI, voxel_size: float, dtype) -> tuple[np.ndarray, torch.Tensor]:
    """Local coords plus feature tensor (backbone features + box offsets).

    RoI features may be a torch tensor (training path, keeps gradients) or a
    numpy array (inference path).
    """
    coords = roi.coords - roi.coords.min(axis=0)
    centers = voxel_center(roi.coords, voxel_size)
    box = roi.proposal.box
    offsets = (centers - box.center) / box.size
    if torch.is_tensor(roi.features):
        feats = torch.cat([roi.features.to(dtype),
                           torch.as_tensor(offsets, dtype=dtype)], dim=1)
    else:
        feats = torch.as_tensor(np.concatenate([roi.features, offsets], axis=1),
                                dtype=dtype)
    return coords, feats


def refine_logits_batch(model: TinyUNet | None, rois: list, voxel_size: float) -> list:
    """Per-voxel logits for each RoI; RoIs share weights and never interact.

    Returns a list of 1-D tensors aligned with each RoI's voxel order. RoIs
    are stacked along the batch axis internally, which may perturb results
    only at BLAS-reduction level (< 1e-6).
    """
    if model is None or model.levels == 0:
        return [torch.full((roi.num_voxels,), float("inf")) for roi in rois]
    nonempty = [(i, roi) for i, roi in enumerate(rois) if roi.num_voxels > 0]
    out = [torch.zeros(0, dtype=model.dtype) for _ in rois]
    if not nonempty:
        return out
    rows, feats = [], []
    for b, (_, roi) in enumerate(nonempty):
        coords, f = _roi_input(roi, voxel_size, model.dtype)
        rows.append(np.column_stack(
            [np.full(coords.shape[0], b, dtype=np.int64), coords]))
        feats.append(f)
    topo = GridTopology(np.concatenate(rows, axis=0))
    logits = model(topo, torch.cat(feats, dim=0))
    start = 0
    for (i, roi) in nonempty:
        out[i] = logits[start:start + roi.num_voxels]
        start += roi.num_voxels
    return out


def unet_forward(roi: RoI, config: RefinerConfig, model: TinyUNet | None,
                 voxel_size: float) -> torch.Tensor:
    """Logits for a single RoI; the level-0 bypass marks everything foreground."""
    config.validate()
    if config.levels == 0:
        return torch.full((roi.num_voxels,), float("inf"))
    return refine_logits_batch(model, [roi], voxel_size)[0]


def gt_voxel_labels(grid: SparseGrid, instance_ids: np.ndarray,
                    roi: RoI, instance_id: int, rule: str = "any") -> np.ndarray:
    """Foreground labels for an RoI's voxels against one ground-truth instance."""
    m = grid.num_voxels
    inst_pts = instance_ids == instance_id
    inst_counts = np.bincount(grid.point_to_voxel[inst_pts], minlength=m)
    if rule == "any":
        fg = inst_counts > 0
    elif rule == "majority":
        total = np.bincount(grid.point_to_voxel, minlength=m)
        fg = inst_counts * 2 > total
    else:
        raise DataError(f"unknown gt_label_rule {rule!r}")
    return fg[roi.voxel_indices]


LOGIT_CLAMP = 30.0


def seg_loss(logit_list: list, label_list: list) -> torch.Tensor:
    """Global-mean BCE over every voxel of every matched RoI.

    Logits are clamped to +/-30 first so the loss stays finite. With no
    matched pairs the loss is exactly 0 with no gradient.
    """
    if len(logit_list) != len(label_list):
        raise DataError("seg_loss inputs must align")
    pieces, targets = [], []
    for logits, labels in zip(logit_list, label_list):
        labels = np.asarray(labels, dtype=bool)
        if logits.shape[0] != labels.shape[0]:
            raise DataError("seg_loss logits/labels length mismatch")
        if logits.shape[0] == 0:
            continue
        pieces.append(logits)
        targets.append(torch.as_tensor(labels.astype(np.float64), dtype=logits.dtype))
    if not pieces:
        return torch.zeros(())
    logits = torch.clamp(torch.cat(pieces), -LOGIT_CLAMP, LOGIT_CLAMP)
    target = torch.cat(targets)
    total = max(int(logits.shape[0]), 1)
    return F.binary_cross_entropy_with_logits(logits, target, reduction="sum") / total


def predict_masks(grid: SparseGrid, proposals: list, config: RefinerConfig,
                  model: TinyUNet | None, roi_features: np.ndarray | None = None) -> list:
    """Instance masks for a scene: RoI -> U-Net -> voxel labels -> points.

    `roi_features` optionally overrides the grid's stored features with
    backbone features aligned to grid.coords rows. Proposals are processed in
    descending score order; empty RoIs and empty masks are dropped.
    """
    config.validate()
    order = sorted(range(len(proposals)),
                   key=lambda i: (-proposals[i].score, i))
    feats_grid = grid if roi_features is None else SparseGrid(
        voxel_size=grid.voxel_size, coords=grid.coords,
        features=roi_features, point_to_voxel=grid.point_to_voxel)
    rois = [extract_roi(feats_grid, proposals[i]) for i in order]
    logit_list = refine_logits_batch(model if config.levels > 0 else None,
                                     rois, grid.voxel_size)
    masks = []
    for roi, logits in zip(rois, logit_list):
        if roi.num_voxels == 0:
            continue
        if config.levels == 0:
            fg = np.ones(roi.num_voxels, dtype=bool)
        else:
            with torch.no_grad():
                fg = (torch.sigmoid(logits) > config.mask_threshold).numpy()
        if not np.any(fg):
            continue
        voxel_labels = np.zeros(grid.num_voxels, dtype=bool)
        voxel_labels[roi.voxel_indices[fg]] = True
        point_mask = voxel_labels[grid.point_to_voxel]
        if not np.any(point_mask):
            continue
        masks.append(InstanceMask(point_mask=point_mask,
                                  class_id=roi.proposal.class_id,
                                  score=roi.proposal.score))
    return masks


# ---------------------------------------------------------------------------
# Prediction file IO
# ---------------------------------------------------------------------------

def write_predictions(masks: list, path):
    """Per-scene prediction file: magic, then per mask a header and an
    ascending list of the true point indices."""
    lines = [PRED_MAGIC]
    for mask in masks:
        lines.append(f"{int(mask.class_id)} {format(float(mask.score), '.17g')}")
        idx = np.flatnonzero(mask.point_mask)
        lines.append(" ".join(str(int(i)) for i in idx))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_predictions(path, num_points: int) -> list:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SceneParseError(path, 1, "empty file")
    if lines[0] != PRED_MAGIC:
        raise SceneParseError(path, 1, f"bad header {lines[0]!r}, expected {PRED_MAGIC!r}")
    body = lines[1:]
    if len(body) % 2 != 0:
        raise SceneParseError(path, len(lines) + 1, "dangling mask header")
    masks = []
    for k in range(0, len(body), 2):
        lineno = k + 2
        tokens = body[k].split()
        if len(tokens) != 2:
            raise SceneParseError(path, lineno, f"expected 'class score', got {body[k]!r}")
        try:
            class_id, score = int(tokens[0]), float(tokens[1])
        except ValueError:
            raise SceneParseError(path, lineno, f"unparsable mask header {body[k]!r}")
        try:
            idx = np.array([int(t) for t in body[k + 1].split()], dtype=np.int64)
        except ValueError:
            raise SceneParseError(path, lineno + 1, "unparsable index list")
        if idx.size and (idx.min() < 0 or idx.max() >= num_points):
            raise SceneParseError(path, lineno + 1, "point index out of range")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise SceneParseError(path, lineno + 1, "indices must be strictly ascending")
        mask = np.zeros(num_points, dtype=bool)
        mask[idx] = True
        masks.append(InstanceMask(point_mask=mask, class_id=class_id, score=score))
    return masks
