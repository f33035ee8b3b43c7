"""Finite-difference gradient checking against torch autograd.

All checks run at 64-bit precision; the comparison follows the usual
|analytic - numeric| <= atol + rtol * |numeric| rule.
"""

from __future__ import annotations

import numpy as np
import torch

from deskseg.detector import focal_loss, iou_loss
from deskseg.geometry import Box3D
from deskseg.pipeline import DecodeSettings, Pipeline
from deskseg.refiner import RefinerConfig, seg_loss
from deskseg.scene import PointCloud
from deskseg.trainer import SceneRecord, compute_losses

RTOL = 1e-4
ATOL = 1e-7
FD_STEP = 1e-6


def check_tensor_grad(loss_fn, tensor: torch.Tensor, max_entries: int = 12,
                      rng: np.random.Generator | None = None):
    """Compare autograd grads of loss_fn(tensor) against central differences.

    Returns the worst (analytic, numeric) violation tuple or None.
    """
    rng = rng or np.random.default_rng(0)
    tensor = tensor.detach().clone().requires_grad_(True)
    loss = loss_fn(tensor)
    loss.backward()
    grad = tensor.grad.detach().numpy()
    flat_size = int(np.prod(tensor.shape))
    picks = rng.choice(flat_size, size=min(max_entries, flat_size), replace=False)
    data = tensor.detach().numpy()
    failures = []
    for flat in picks:
        idx = np.unravel_index(flat, tensor.shape)
        orig = data[idx]
        data[idx] = orig + FD_STEP
        with torch.no_grad():
            f_plus = float(loss_fn(torch.tensor(data)))
        data[idx] = orig - FD_STEP
        with torch.no_grad():
            f_minus = float(loss_fn(torch.tensor(data)))
        data[idx] = orig
        numeric = (f_plus - f_minus) / (2 * FD_STEP)
        analytic = grad[idx]
        if abs(analytic - numeric) > ATOL + RTOL * abs(numeric):
            failures.append((idx, analytic, numeric))
    return failures


def check_module_grad(loss_fn, modules, max_entries: int = 8,
                      rng: np.random.Generator | None = None):
    """Finite-difference check of loss_fn() against module parameter grads."""
    rng = rng or np.random.default_rng(0)
    params = []
    for module in modules:
        params.extend(p for p in module.parameters() if p.requires_grad)
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    failures = []
    for p in params:
        grad = np.zeros(tuple(p.shape)) if p.grad is None \
            else p.grad.detach().numpy().copy()
        flat_size = int(np.prod(p.shape))
        picks = rng.choice(flat_size, size=min(max_entries, flat_size),
                           replace=False)
        with torch.no_grad():
            for flat in picks:
                idx = np.unravel_index(flat, tuple(p.shape))
                orig = float(p[idx])
                p[idx] = orig + FD_STEP
                f_plus = float(loss_fn())
                p[idx] = orig - FD_STEP
                f_minus = float(loss_fn())
                p[idx] = orig
                numeric = (f_plus - f_minus) / (2 * FD_STEP)
                analytic = grad[idx]
                if abs(analytic - numeric) > ATOL + RTOL * abs(numeric):
                    failures.append((idx, analytic, numeric))
    for p in params:
        p.grad = None
    return failures


# ---------------------------------------------------------------------------
# Random tiny instances for each loss family
# ---------------------------------------------------------------------------

def random_focal_instance(rng):
    n = int(rng.integers(2, 12))
    c = int(rng.integers(1, 4))
    logits = torch.tensor(rng.normal(scale=2, size=(n, c)))
    labels = rng.integers(-2, c, size=n)
    if not np.any(labels >= 0):
        labels[0] = 0
    return logits, (lambda t: focal_loss(t, labels))


def random_iou_instance(rng):
    n = int(rng.integers(1, 8))
    # Overlapping pairs: gt near pred so the loss is in its smooth region.
    gt_np = np.column_stack([rng.uniform(0, 1, (n, 3)),
                             rng.uniform(0.3, 0.8, (n, 3))])
    pred_np = gt_np + rng.uniform(-0.08, 0.08, gt_np.shape)
    pred_np[:, 3:] = np.abs(pred_np[:, 3:]) + 0.05
    gt = torch.tensor(gt_np)
    return torch.tensor(pred_np), (lambda t: iou_loss(t, gt))


def random_seg_instance(rng):
    sizes = [int(rng.integers(1, 10)) for _ in range(int(rng.integers(1, 4)))]
    labels = [rng.integers(0, 2, s).astype(bool) for s in sizes]
    flat = torch.tensor(rng.normal(scale=3, size=sum(sizes)))
    bounds = np.cumsum([0] + sizes)
    def loss_fn(t):
        pieces = [t[bounds[i]:bounds[i + 1]] for i in range(len(sizes))]
        return seg_loss(pieces, labels)
    return flat, loss_fn


def tiny_scene(rng, n_obj=2) -> SceneRecord:
    """A miniature labeled scene for composite-loss checks."""
    chunks, sems, insts, gt = [], [], [], []
    for k in range(n_obj):
        center = np.array([0.25 + 0.45 * k, 0.3 + 0.3 * k, 0.12])
        pts = center + rng.uniform(-0.08, 0.08, size=(30, 3))
        chunks.append(pts)
        sems.append(np.full(30, k % 2))
        insts.append(np.full(30, k))
        gt.append((Box3D.from_bounds(pts.min(axis=0), pts.max(axis=0)), k % 2))
    floor = np.column_stack([rng.uniform(0, 1, (60, 2)), np.zeros(60)])
    chunks.append(floor)
    sems.append(np.full(60, -1))
    insts.append(np.full(60, -1))
    cloud = PointCloud(points=np.concatenate(chunks),
                       semantic_ids=np.concatenate(sems),
                       instance_ids=np.concatenate(insts))
    return SceneRecord(cloud=cloud, gt_boxes=gt, scene_id="tiny")


def tiny_pipeline(seed=0, levels=2) -> Pipeline:
    return Pipeline.build(
        num_classes=2, voxel_size=0.08, widths=(4, 8, 12, 16),
        decoder_width=6, head_levels=(1, 2),
        refiner_config=RefinerConfig(levels=levels, base_channels=4),
        decode=DecodeSettings(score_threshold=0.0, nms_iou=0.5,
                              max_proposals=8, pre_nms_limit=64),
        seed=seed, dtype=torch.float64)


def composite_loss_fn(pipeline, record):
    def loss_fn():
        l_cls, l_reg, l_seg = compute_losses([record], pipeline, warmup=True)
        return l_cls + l_reg + l_seg
    return loss_fn
