"""Fully-convolutional box proposal generator on sparse voxel grids.

A four-level sparse encoder (stride-2 downsampling, widths doubling) feeds a
top-down decoder that emits a fixed-width feature grid at every stride; the
stride-1 grid doubles as the RoI feature source. Shared per-voxel heads on
the coarser levels predict class logits and box deltas, which decode into
axis-aligned proposals filtered by score and greedy NMS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DataError
from .geometry import FACE_TOL, Box3D
from .sparse import (DownConv3d, GridTopology, Linear1x1, SparseTensor,
                     SubmConv3d, UpConv3d, build_topology)
from .voxels import SparseGrid

DEFAULT_WIDTHS = (32, 64, 128, 256)
DEFAULT_HEAD_LEVELS = (1, 2, 3)
K_MAX_POSITIVES = 18
# Reference size multiplier: s_ref = S_REF_CELLS * stride * voxel_size.
S_REF_CELLS = 4.0

LABEL_NEGATIVE = -1
LABEL_IGNORED = -2


@dataclass(frozen=True)
class Proposal:
    """A candidate object: axis-aligned box, class id, confidence score."""

    box: Box3D
    class_id: int
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"proposal score {self.score} outside [0, 1]")


@dataclass
class BackboneOutput:
    """Decoder feature grids, one per level; level ell has stride 2**ell."""

    levels: list  # list[SparseTensor]

    @property
    def roi_features(self) -> SparseTensor:
        return self.levels[0]


@dataclass
class HeadOutput:
    """Per-voxel head predictions at one backbone level."""

    level: int
    stride: int
    coords: np.ndarray     # (M, 4) [b, x, y, z] in stride units
    logits: torch.Tensor   # (M, C)
    deltas: torch.Tensor   # (M, 6)


@dataclass
class DetectionTargets:
    """Per-level assignment results aligned with head output rows."""

    labels: list = field(default_factory=list)    # (M,) -1 neg, -2 ignored, >=0 class
    reg: list = field(default_factory=list)       # (M, 6) regression targets
    gt_index: list = field(default_factory=list)  # (M,) gt row for positives, else -1


def _relu(x: SparseTensor) -> SparseTensor:
    return x.with_features(F.relu(x.features))


class Detector(nn.Module):
    """Sparse encoder-decoder backbone plus shared classification/box heads."""

    def __init__(self, num_classes: int, in_channels: int = 4,
                 widths: tuple = DEFAULT_WIDTHS, decoder_width: int = 32,
                 head_levels: tuple = DEFAULT_HEAD_LEVELS,
                 voxel_size: float = 0.05, dtype=torch.float32):
        super().__init__()
        self.num_classes = num_classes
        self.widths = tuple(widths)
        self.decoder_width = decoder_width
        self.head_levels = tuple(head_levels)
        self.voxel_size = float(voxel_size)
        self.num_levels = len(self.widths)
        self.dtype = dtype

        self.stem = SubmConv3d(in_channels, widths[0], dtype=dtype)
        # The coarsest grid holds a handful of voxels; a pointwise conv there
        # saves the 27-offset scatter without losing useful context.
        self.enc_convs = nn.ModuleList(
            [SubmConv3d(widths[i], widths[i], dtype=dtype)
             if i < self.num_levels - 1 else
             Linear1x1(widths[i], widths[i], dtype=dtype)
             for i in range(1, self.num_levels)])
        self.downs = nn.ModuleList(
            [DownConv3d(widths[i - 1], widths[i], dtype=dtype)
             for i in range(1, self.num_levels)])
        self.laterals = nn.ModuleList(
            [Linear1x1(w, decoder_width, dtype=dtype) for w in widths])
        self.ups = nn.ModuleList(
            [UpConv3d(decoder_width, decoder_width, dtype=dtype)
             for _ in range(1, self.num_levels)])
        self.smooths = nn.ModuleList(
            [SubmConv3d(decoder_width, decoder_width, dtype=dtype)
             for _ in range(self.num_levels - 1)])
        self.head_conv = SubmConv3d(decoder_width, decoder_width, dtype=dtype)
        self.cls_head = Linear1x1(decoder_width, num_classes, dtype=dtype)
        self.reg_head = Linear1x1(decoder_width, 6, dtype=dtype)
        # Bias classification logits toward the background prior so early
        # focal loss is dominated by positives rather than a sea of negatives.
        prior = 0.01
        nn.init.constant_(self.cls_head.bias, -float(np.log((1 - prior) / prior)))

    def s_ref(self, level: int) -> float:
        return S_REF_CELLS * (2 ** level) * self.voxel_size

    def backbone(self, topo: GridTopology, features: torch.Tensor) -> BackboneOutput:
        if topo.num_voxels == 0:
            raise DataError("backbone requires a non-empty grid")
        x = SparseTensor(topo, features, stride=1)
        enc = []
        x = _relu(self.stem(x))
        enc.append(x)
        for i in range(1, self.num_levels):
            x = _relu(self.downs[i - 1](x))
            x = _relu(self.enc_convs[i - 1](x))
            enc.append(x)

        top = self.num_levels - 1
        dec = [None] * self.num_levels
        dec[top] = _relu(self.laterals[top](enc[top]))
        for i in range(top - 1, -1, -1):
            lateral = self.laterals[i](enc[i])
            up = self.ups[i](dec[i + 1], enc[i].topo, enc[i].stride)
            merged = lateral.with_features(lateral.features + up.features)
            dec[i] = _relu(self.smooths[i](merged))
        return BackboneOutput(levels=dec)

    def heads(self, bb: BackboneOutput) -> list:
        outs = []
        for level in self.head_levels:
            feat = _relu(self.head_conv(bb.levels[level]))
            logits = self.cls_head(feat).features
            deltas = self.reg_head(feat).features
            outs.append(HeadOutput(level=level, stride=2 ** level,
                                   coords=feat.topo.coords,
                                   logits=logits, deltas=deltas))
        return outs

    def forward_grid(self, grid: SparseGrid):
        """Single-scene convenience: voxel grid in, (backbone, heads) out."""
        topo = build_topology(grid.coords)
        feats = torch.as_tensor(grid.features, dtype=self.dtype)
        bb = self.backbone(topo, feats)
        return bb, self.heads(bb)


def backbone_forward(detector: Detector, grid: SparseGrid) -> BackboneOutput:
    topo = build_topology(grid.coords)
    feats = torch.as_tensor(grid.features, dtype=detector.dtype)
    return detector.backbone(topo, feats)


def head_forward(detector: Detector, bb: BackboneOutput) -> list:
    return detector.heads(bb)


# ---------------------------------------------------------------------------
# Target assignment
# ---------------------------------------------------------------------------

def _level_centers(coords: np.ndarray, stride: int, voxel_size: float) -> np.ndarray:
    return (coords.astype(np.float64) + 0.5) * (stride * voxel_size)


def assign_targets(gt, occupancies, voxel_size: float,
                   k_max: int = K_MAX_POSITIVES,
                   s_ref_cells: float = S_REF_CELLS) -> DetectionTargets:
    """Assign per-voxel detection targets on one scene.

    `gt` is a list of (Box3D, class_id); `occupancies` a list of
    (stride, coords) pairs with (M, 3) integer coords in stride units.
    A voxel is positive iff its center lies inside at least one box, with the
    smallest-volume containing box winning (ties to the lower gt index). Per
    box and level only the k_max voxels nearest the box center stay positive;
    the rest are demoted to ignored.
    """
    boxes = [b for b, _ in gt]
    classes = np.array([c for _, c in gt], dtype=np.int64)
    volumes = np.array([b.volume for b in boxes])
    targets = DetectionTargets()
    for stride, coords in occupancies:
        m = coords.shape[0]
        labels = np.full(m, LABEL_NEGATIVE, dtype=np.int64)
        reg = np.zeros((m, 6), dtype=np.float64)
        gt_index = np.full(m, -1, dtype=np.int64)
        if m == 0 or len(boxes) == 0:
            targets.labels.append(labels)
            targets.reg.append(reg)
            targets.gt_index.append(gt_index)
            continue
        centers = _level_centers(coords, stride, voxel_size)
        s_ref = s_ref_cells * stride * voxel_size

        # Containment matrix (M, K), inclusive faces.
        lo = np.stack([b.lo for b in boxes])
        hi = np.stack([b.hi for b in boxes])
        inside = np.all((centers[:, None, :] >= lo[None] - FACE_TOL) &
                        (centers[:, None, :] <= hi[None] + FACE_TOL), axis=2)
        any_inside = inside.any(axis=1)
        if np.any(any_inside):
            # Smallest containing volume wins; ties go to the lower gt index.
            vol_masked = np.where(inside, volumes[None, :], np.inf)
            winner = np.argmin(vol_masked, axis=1)
            rows = np.flatnonzero(any_inside)
            gt_index[rows] = winner[rows]
            labels[rows] = classes[winner[rows]]
            for g, box in enumerate(boxes):
                claimed = rows[winner[rows] == g]
                if claimed.size > k_max:
                    d2 = np.sum((centers[claimed] - box.center) ** 2, axis=1)
                    order = np.lexsort((coords[claimed][:, 2], coords[claimed][:, 1],
                                        coords[claimed][:, 0], d2))
                    demote = claimed[order[k_max:]]
                    labels[demote] = LABEL_IGNORED
                    gt_index[demote] = -1
            pos = np.flatnonzero(labels >= 0)
            for r in pos:
                box = boxes[gt_index[r]]
                reg[r, :3] = (box.center - centers[r]) / (stride * voxel_size)
                reg[r, 3:] = np.log(box.size / s_ref)
        targets.labels.append(labels)
        targets.reg.append(reg)
        targets.gt_index.append(gt_index)
    return targets


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def focal_loss(logits: torch.Tensor, labels, alpha: float = 0.25,
               gamma: float = 2.0) -> torch.Tensor:
    """One-vs-all multi-class focal loss, summed over non-ignored voxels and
    normalized by the positive count (at least 1)."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    keep = labels != LABEL_IGNORED
    logits = logits[keep]
    labels = labels[keep]
    if logits.numel() == 0:
        return logits.sum()
    onehot = torch.zeros_like(logits)
    pos = labels >= 0
    if pos.any():
        onehot[pos, labels[pos]] = 1.0
    log_p = F.logsigmoid(logits)
    log_not_p = F.logsigmoid(-logits)
    p = torch.sigmoid(logits)
    loss = -(alpha * onehot * (1 - p) ** gamma * log_p
             + (1 - alpha) * (1 - onehot) * p ** gamma * log_not_p)
    n_pos = max(int(pos.sum()), 1)
    return loss.sum() / n_pos


def pairwise_iou_torch(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Element-aligned IoU of (P, 6) center+size boxes; differentiable.

    Volumes come from corner differences so identical boxes give exactly 1.
    """
    p_lo = pred[:, :3] - pred[:, 3:] / 2
    p_hi = pred[:, :3] + pred[:, 3:] / 2
    g_lo = gt[:, :3] - gt[:, 3:] / 2
    g_hi = gt[:, :3] + gt[:, 3:] / 2
    edges = torch.clamp(torch.minimum(p_hi, g_hi) - torch.maximum(p_lo, g_lo), min=0)
    inter = edges[:, 0] * edges[:, 1] * edges[:, 2]
    p_edges = p_hi - p_lo
    g_edges = g_hi - g_lo
    vol_p = p_edges[:, 0] * p_edges[:, 1] * p_edges[:, 2]
    vol_g = g_edges[:, 0] * g_edges[:, 1] * g_edges[:, 2]
    return inter / (vol_p + vol_g - inter)


def iou_loss(pred_boxes: torch.Tensor, gt_boxes: torch.Tensor) -> torch.Tensor:
    """Mean (1 - IoU) over aligned positive pairs; empty input gives 0."""
    if pred_boxes.shape[0] == 0:
        return pred_boxes.sum()
    return (1.0 - pairwise_iou_torch(pred_boxes, gt_boxes)).mean()


DELTA_SIZE_CLAMP = 20.0


def decode_boxes(head: HeadOutput, voxel_size: float,
                 s_ref_cells: float = S_REF_CELLS,
                 rows: np.ndarray | None = None) -> torch.Tensor:
    """Decode (M, 6) center+size boxes from head deltas; differentiable."""
    coords = head.coords if rows is None else head.coords[rows]
    deltas = head.deltas if rows is None else head.deltas[rows]
    cell = head.stride * voxel_size
    centers_np = _level_centers(coords[:, 1:], head.stride, voxel_size)
    centers = torch.as_tensor(centers_np, dtype=deltas.dtype)
    center = centers + deltas[:, :3] * cell
    size = torch.exp(torch.clamp(deltas[:, 3:], -DELTA_SIZE_CLAMP, DELTA_SIZE_CLAMP))
    size = size * (s_ref_cells * cell)
    return torch.cat([center, size], dim=1)


def detection_loss(head_outs: list, targets: DetectionTargets,
                   gt_boxes_flat: list, voxel_size: float,
                   alpha: float = 0.25, gamma: float = 2.0):
    """(L_cls, L_reg) over all head levels of one assignment.

    `gt_boxes_flat` is the scene's Box3D list indexed by targets.gt_index.
    Positive counting for the focal normalizer spans all levels jointly.
    """
    logits = torch.cat([h.logits for h in head_outs], dim=0)
    labels = np.concatenate(targets.labels)
    l_cls = focal_loss(logits, labels, alpha=alpha, gamma=gamma)

    pred_rows, gt_rows = [], []
    for h, lab, gidx in zip(head_outs, targets.labels, targets.gt_index):
        rows = np.flatnonzero(lab >= 0)
        if rows.size == 0:
            continue
        pred_rows.append(decode_boxes(h, voxel_size, rows=rows))
        gt_arr = np.stack([np.concatenate([gt_boxes_flat[g].center,
                                           gt_boxes_flat[g].size])
                           for g in gidx[rows]])
        gt_rows.append(torch.as_tensor(gt_arr, dtype=h.deltas.dtype))
    if pred_rows:
        pred = torch.cat(pred_rows, dim=0)
        gt = torch.cat(gt_rows, dim=0)
        l_reg = iou_loss(pred, gt)
    else:
        l_reg = logits.sum() * 0.0
    return l_cls, l_reg


# ---------------------------------------------------------------------------
# Proposal decoding and NMS
# ---------------------------------------------------------------------------

def _candidate_table(head_outs: list, voxel_size: float, batch: int,
                     score_threshold: float, s_ref_cells: float = S_REF_CELLS):
    """Flatten head outputs for one scene into score-thresholded candidates."""
    boxes, scores, classes, tiekeys = [], [], [], []
    for h in head_outs:
        rows = np.flatnonzero(h.coords[:, 0] == batch)
        if rows.size == 0:
            continue
        with torch.no_grad():
            logits = h.logits[rows]
            best = torch.max(logits, dim=1)
            score = torch.sigmoid(best.values).numpy()
            class_id = best.indices.numpy()
            decoded = decode_boxes(h, voxel_size, s_ref_cells=s_ref_cells,
                                   rows=rows).numpy()
        keep = score >= score_threshold
        if not np.any(keep):
            continue
        boxes.append(decoded[keep])
        scores.append(score[keep])
        classes.append(class_id[keep])
        coords = h.coords[rows][keep][:, 1:]
        tk = np.column_stack([np.full(coords.shape[0], h.level, dtype=np.int64), coords])
        tiekeys.append(tk)
    if not boxes:
        return (np.zeros((0, 6)), np.zeros(0), np.zeros(0, dtype=np.int64),
                np.zeros((0, 4), dtype=np.int64))
    return (np.concatenate(boxes), np.concatenate(scores),
            np.concatenate(classes), np.concatenate(tiekeys))


def _score_order(scores: np.ndarray, tiekeys: np.ndarray) -> np.ndarray:
    """Descending score; ties broken by ascending (level, x, y, z)."""
    return np.lexsort((tiekeys[:, 3], tiekeys[:, 2], tiekeys[:, 1],
                       tiekeys[:, 0], -scores))


def greedy_nms(boxes: np.ndarray, order: np.ndarray, nms_iou: float) -> list:
    """Greedy class-agnostic suppression; returns kept positions in order.

    IoU follows the corner-difference convention of box_iou (products in
    x, y, z order), vectorized against the kept set per candidate.
    """
    lo = boxes[:, :3] - boxes[:, 3:] / 2
    hi = boxes[:, :3] + boxes[:, 3:] / 2
    vol = (hi[:, 0] - lo[:, 0]) * (hi[:, 1] - lo[:, 1]) * (hi[:, 2] - lo[:, 2])
    kept: list = []
    kept_lo = np.empty((0, 3))
    kept_hi = np.empty((0, 3))
    kept_vol = np.empty(0)
    for i in order:
        if kept:
            edges = np.clip(np.minimum(hi[i], kept_hi) - np.maximum(lo[i], kept_lo),
                            0, None)
            inter = edges[:, 0] * edges[:, 1] * edges[:, 2]
            iou = np.where(inter > 0, inter / (vol[i] + kept_vol - inter), 0.0)
            if np.any(iou >= nms_iou):
                continue
        kept.append(int(i))
        kept_lo = np.vstack([kept_lo, lo[i]])
        kept_hi = np.vstack([kept_hi, hi[i]])
        kept_vol = np.append(kept_vol, vol[i])
    return kept


def decode_proposals(head_outs: list, voxel_size: float,
                     score_threshold: float = 0.02, nms_iou: float = 0.35,
                     max_proposals: int = 60, batch: int = 0,
                     pre_nms_limit: int | None = None) -> list:
    """Per-voxel argmax class + sigmoid score, threshold, NMS, truncation."""
    if not (0.0 <= score_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise DataError("score_threshold and nms_iou must lie in [0, 1]")
    if max_proposals < 1:
        raise DataError("max_proposals must be at least 1")
    boxes, scores, classes, tiekeys = _candidate_table(
        head_outs, voxel_size, batch, score_threshold)
    if boxes.shape[0] == 0:
        return []
    order = _score_order(scores, tiekeys)
    if pre_nms_limit is not None:
        order = order[:pre_nms_limit]
    kept = greedy_nms(boxes, order, nms_iou)[:max_proposals]
    out = []
    for i in kept:
        size = np.maximum(boxes[i, 3:], 1e-9)
        out.append(Proposal(box=Box3D(center=boxes[i, :3].copy(), size=size),
                            class_id=int(classes[i]), score=float(scores[i])))
    return out
