"""Point cloud voxelization, RoI selection, and voxel->point label broadcast.

Voxel coordinates are floor(p / voxel_size) and may be negative; no global
shift is applied. A proposal's RoI is the set of voxels whose centers fall
inside its box, with the containment test inclusive on both faces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import FACE_TOL, Box3D
from .scene import PointCloud


@dataclass
class SparseGrid:
    """Occupied voxel coordinates, per-voxel features, and the point map."""

    voxel_size: float
    coords: np.ndarray          # (M, 3) int64, unique, lexicographically sorted
    features: np.ndarray        # (M, F) float
    point_to_voxel: np.ndarray  # (N,) indices into coords

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def num_points(self) -> int:
        return self.point_to_voxel.shape[0]

    def voxel_centers(self) -> np.ndarray:
        return voxel_center(self.coords, self.voxel_size)


def voxel_center(coord, voxel_size: float) -> np.ndarray:
    """Center of a voxel cell: (coord + 0.5) * voxel_size, componentwise."""
    if voxel_size <= 0:
        raise DataError("voxel_size must be positive")
    return (np.asarray(coord, dtype=np.float64) + 0.5) * voxel_size


def default_featurizer(points, coords, point_to_voxel, voxel_size):
    """4 channels: occupancy count over max count, mean offset from center."""
    m = coords.shape[0]
    counts = np.bincount(point_to_voxel, minlength=m).astype(np.float64)
    centers = voxel_center(coords, voxel_size)
    offsets = np.zeros((m, 3), dtype=np.float64)
    for axis in range(3):
        sums = np.bincount(point_to_voxel, weights=points[:, axis], minlength=m)
        offsets[:, axis] = sums / counts - centers[:, axis]
    feats = np.empty((m, 4), dtype=np.float64)
    feats[:, 0] = counts / counts.max()
    feats[:, 1:] = offsets
    return feats


def voxelize(cloud: PointCloud, voxel_size: float, featurizer=default_featurizer) -> SparseGrid:
    """Quantize points onto the sparse integer grid of side voxel_size."""
    if voxel_size <= 0:
        raise DataError("voxel_size must be positive")
    points = cloud.points
    if points.shape[0] == 0:
        raise DataError("cannot voxelize an empty cloud")
    if not np.all(np.isfinite(points)):
        raise DataError("cannot voxelize non-finite coordinates")
    raw = np.floor(points / voxel_size).astype(np.int64)
    # Pack each coord triple into one int64 so dedup runs on a 1-D array;
    # the packed order equals lexicographic row order.
    offset = 1 << 20
    if raw.min() < -offset or raw.max() >= offset:
        raise DataError("voxel coordinates out of packable range")
    keys = ((raw[:, 0] + offset) << 42) | ((raw[:, 1] + offset) << 21) \
        | (raw[:, 2] + offset)
    unique_keys, point_to_voxel = np.unique(keys, return_inverse=True)
    point_to_voxel = point_to_voxel.reshape(-1).astype(np.int64)
    coords = np.column_stack([(unique_keys >> 42) - offset,
                              ((unique_keys >> 21) & ((1 << 21) - 1)) - offset,
                              (unique_keys & ((1 << 21) - 1)) - offset])
    features = featurizer(points, coords, point_to_voxel, voxel_size)
    return SparseGrid(voxel_size=float(voxel_size), coords=coords,
                      features=np.asarray(features), point_to_voxel=point_to_voxel)


@dataclass
class RoI:
    """A proposal plus the grid voxels whose centers fall inside its box."""

    proposal: "Proposal"        # deskseg.detector.Proposal
    voxel_indices: np.ndarray   # (V,) ascending indices into the scene grid
    coords: np.ndarray          # (V, 3) the selected voxel coordinates
    features: np.ndarray        # (V, F) copies of the grid features

    @property
    def num_voxels(self) -> int:
        return self.voxel_indices.shape[0]


def extract_roi(grid: SparseGrid, proposal) -> RoI:
    """Select voxels whose centers lie inside the proposal box (inclusive)."""
    box: Box3D = proposal.box
    centers = grid.voxel_centers()
    half = box.size / 2.0 + FACE_TOL
    inside = np.all(np.abs(centers - box.center) <= half, axis=1)
    idx = np.flatnonzero(inside).astype(np.int64)
    return RoI(proposal=proposal, voxel_indices=idx,
               coords=grid.coords[idx], features=grid.features[idx])


def devoxelize_mask(grid: SparseGrid, voxel_labels: np.ndarray) -> np.ndarray:
    """Broadcast per-voxel booleans back onto every point of the scene."""
    voxel_labels = np.asarray(voxel_labels, dtype=bool)
    if voxel_labels.shape != (grid.num_voxels,):
        raise DataError(
            f"voxel_labels has shape {voxel_labels.shape}, expected ({grid.num_voxels},)")
    return voxel_labels[grid.point_to_voxel]
