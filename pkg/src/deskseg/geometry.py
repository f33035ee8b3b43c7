"""Axis-aligned 3D boxes and the overlap math used throughout the pipeline.

Boxes are parameterized by center and size (meters). Containment tests are
inclusive on both faces with a small tolerance so that ties at a face are
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Inclusive-face tolerance for point/center-in-box tests (meters).
FACE_TOL = 1e-9


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned box given by center and (strictly positive) size."""

    center: np.ndarray  # (3,) float
    size: np.ndarray    # (3,) float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        size = np.asarray(self.size, dtype=np.float64)
        if center.shape != (3,) or size.shape != (3,):
            raise ValueError("Box3D center and size must be 3-vectors")
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size))):
            raise ValueError("Box3D parameters must be finite")
        if not np.all(size > 0):
            raise ValueError("Box3D size must be strictly positive")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.size / 2.0

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.size / 2.0

    @property
    def volume(self) -> float:
        return float(self.size[0] * self.size[1] * self.size[2])

    @staticmethod
    def from_bounds(lo, hi) -> "Box3D":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return Box3D(center=(lo + hi) / 2.0, size=hi - lo)

    def contains_points(self, points: np.ndarray, tol: float = FACE_TOL) -> np.ndarray:
        """Inclusive containment mask for an (N, 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        half = self.size / 2.0 + tol
        return np.all(np.abs(points - self.center) <= half, axis=-1)


def box_iou(a: Box3D, b: Box3D) -> float:
    """Volume intersection-over-union of two axis-aligned boxes; 0 when disjoint.

    Overlap lengths and volumes all come from corner differences in fixed
    axis order (x, y, z), so identical boxes give exactly 1.0 and the result
    is reproducible bit-for-bit.
    """
    inter = 1.0
    vol_a = 1.0
    vol_b = 1.0
    for k in range(3):
        a_lo, a_hi = float(a.lo[k]), float(a.hi[k])
        b_lo, b_hi = float(b.lo[k]), float(b.hi[k])
        lo = a_lo if a_lo > b_lo else b_lo
        hi = a_hi if a_hi < b_hi else b_hi
        if hi <= lo:
            return 0.0
        inter *= hi - lo
        vol_a *= a_hi - a_lo
        vol_b *= b_hi - b_lo
    return inter / (vol_a + vol_b - inter)


def boxes_to_arrays(boxes) -> tuple[np.ndarray, np.ndarray]:
    """Stack a sequence of Box3D into (K, 3) lo / hi corner arrays."""
    if len(boxes) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    lo = np.stack([b.lo for b in boxes])
    hi = np.stack([b.hi for b in boxes])
    return lo, hi


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between two box sequences, shape (len(a), len(b))."""
    lo_a, hi_a = boxes_to_arrays(boxes_a)
    lo_b, hi_b = boxes_to_arrays(boxes_b)
    if lo_a.shape[0] == 0 or lo_b.shape[0] == 0:
        return np.zeros((lo_a.shape[0], lo_b.shape[0]))
    lo = np.maximum(lo_a[:, None, :], lo_b[None, :, :])
    hi = np.minimum(hi_a[:, None, :], hi_b[None, :, :])
    edges = np.clip(hi - lo, 0.0, None)
    inter = edges[..., 0] * edges[..., 1] * edges[..., 2]
    vol_a = np.prod(hi_a - lo_a, axis=1)
    vol_b = np.prod(hi_b - lo_b, axis=1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    out = np.zeros_like(inter)
    pos = inter > 0
    out[pos] = inter[pos] / union[pos]
    return out


def box_gap(a: Box3D, b: Box3D) -> float:
    """Euclidean distance between the closest points of two boxes (0 if they touch)."""
    sep = np.maximum(0.0, np.maximum(a.lo - b.hi, b.lo - a.hi))
    return float(np.sqrt(np.sum(sep * sep)))
