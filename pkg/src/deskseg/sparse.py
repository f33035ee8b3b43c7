"""Minimal sparse 3D convolution engine built on gather/scatter kernel maps.

Feature grids are kept as (coords, features) pairs where coords carry a batch
column: (b, x, y, z). Submanifold convolutions preserve the coordinate set;
stride-2 down/up convolutions move between a grid and its floor-divided
parent grid, so every level's occupancy equals the input occupancy
downsampled by integer division, deduplicated.

Coordinate lookup uses packed int64 keys and binary search; kernel maps are
cached on the topology object so all layers sharing a coordinate set reuse
them.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch
from torch import nn

from .errors import DataError

_COORD_OFFSET = 1 << 15
_COORD_LIMIT = 1 << 15  # |coord| must stay below this for key packing


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Pack (M, 4) [b, x, y, z] rows into sortable int64 keys."""
    b = coords[:, 0]
    if b.size and (b.min() < 0 or b.max() >= _COORD_LIMIT):
        raise DataError("batch index out of packable range")
    xyz = coords[:, 1:]
    if xyz.size and (xyz.min() < -_COORD_LIMIT or xyz.max() >= _COORD_LIMIT):
        raise DataError("voxel coordinate out of packable range")
    x = xyz[:, 0] + _COORD_OFFSET
    y = xyz[:, 1] + _COORD_OFFSET
    z = xyz[:, 2] + _COORD_OFFSET
    return (((b << 16 | x) << 16 | y) << 16) | z


def subm_offsets(kernel_size: int) -> np.ndarray:
    r = range(-(kernel_size // 2), kernel_size // 2 + 1)
    return np.array(list(itertools.product(r, r, r)), dtype=np.int64)


class GridTopology:
    """A fixed, lexicographically sorted coordinate set with map caches."""

    def __init__(self, coords: np.ndarray):
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        if coords.ndim != 2 or coords.shape[1] != 4:
            raise DataError("topology coords must have shape (M, 4)")
        keys = pack_keys(coords)
        if keys.size > 1 and np.any(np.diff(keys) <= 0):
            raise DataError("topology coords must be sorted and unique")
        self.coords = coords
        self.keys = keys
        self._subm_maps: dict[int, list] = {}
        self._down: tuple | None = None

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each query coord, or -1 when absent."""
        q = pack_keys(coords)
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        found = (len(self.keys) > 0) & (self.keys[pos_c] == q)
        return np.where(found, pos_c, -1)

    def submanifold_map(self, kernel_size: int = 3):
        """Per-offset (in_idx, out_idx) torch index pairs on this grid."""
        cached = self._subm_maps.get(kernel_size)
        if cached is not None:
            return cached
        pairs = []
        for off in subm_offsets(kernel_size):
            if not np.any(off):
                pairs.append(None)  # center tap: identity gather
                continue
            nbr = self.coords.copy()
            nbr[:, 1:] += off
            in_idx = self.lookup(nbr)
            hit = in_idx >= 0
            pairs.append((torch.from_numpy(in_idx[hit]),
                          torch.from_numpy(np.flatnonzero(hit))))
        self._subm_maps[kernel_size] = pairs
        return pairs

    def downsample(self):
        """Parent topology at double stride plus the child->parent map.

        Returns (parent_topology, parent_idx, octant_rows) where
        parent coords = unique(coords // 2) per batch, parent_idx maps each
        child row to its parent row, and octant_rows[o] lists the child rows
        whose (x, y, z) mod 2 pattern equals octant o.
        """
        if self._down is not None:
            return self._down
        parent_coords = self.coords.copy()
        parent_coords[:, 1:] = np.floor_divide(parent_coords[:, 1:], 2)
        unique_parents, parent_idx = np.unique(parent_coords, axis=0, return_inverse=True)
        parent_idx = parent_idx.reshape(-1).astype(np.int64)
        rem = self.coords[:, 1:] - 2 * unique_parents[parent_idx][:, 1:]
        octant = rem[:, 0] * 4 + rem[:, 1] * 2 + rem[:, 2]
        octant_rows = [torch.from_numpy(np.flatnonzero(octant == o)) for o in range(8)]
        parent_topo = GridTopology(unique_parents)
        self._down = (parent_topo, torch.from_numpy(parent_idx), octant_rows)
        return self._down


class SparseTensor:
    """Features attached to a grid topology at a given stride."""

    def __init__(self, topo: GridTopology, features: torch.Tensor, stride: int = 1):
        if features.shape[0] != topo.num_voxels:
            raise DataError("feature row count does not match topology")
        self.topo = topo
        self.features = features
        self.stride = stride

    @property
    def coords(self) -> np.ndarray:
        return self.topo.coords

    def with_features(self, features: torch.Tensor) -> "SparseTensor":
        return SparseTensor(self.topo, features, self.stride)


def build_topology(coords3: np.ndarray, batch: int = 0) -> GridTopology:
    """Topology for a single scene's (M, 3) lexicographically sorted coords."""
    coords4 = np.column_stack([np.full(coords3.shape[0], batch, dtype=np.int64), coords3])
    return GridTopology(coords4)


def stack_topologies(coord_list) -> tuple[GridTopology, list]:
    """Concatenate per-item (M_i, 3) coords into one batched topology.

    Returns the topology plus per-item row slices.
    """
    rows = []
    slices = []
    start = 0
    for b, c in enumerate(coord_list):
        rows.append(np.column_stack([np.full(c.shape[0], b, dtype=np.int64), c]))
        slices.append(slice(start, start + c.shape[0]))
        start += c.shape[0]
    return GridTopology(np.concatenate(rows, axis=0)), slices


def _init_conv_weight(weight: torch.Tensor, bias: torch.Tensor | None, fan_in: int):
    # Same bound the dense conv default (kaiming uniform, a=sqrt(5)) reduces to.
    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
    nn.init.uniform_(weight, -bound, bound)
    if bias is not None:
        nn.init.uniform_(bias, -bound, bound)


class SubmConv3d(nn.Module):
    """Submanifold convolution: output coords equal input coords."""

    def __init__(self, in_channels, out_channels, kernel_size=3, bias=True,
                 dtype=torch.float32):
        super().__init__()
        self.kernel_size = kernel_size
        k3 = kernel_size ** 3
        self.weight = nn.Parameter(torch.empty(k3, in_channels, out_channels, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=dtype)) if bias else None
        _init_conv_weight(self.weight, self.bias, in_channels * k3)
        self.center = k3 // 2

    def forward(self, x: SparseTensor) -> SparseTensor:
        pairs = x.topo.submanifold_map(self.kernel_size)
        # Center tap first, then in-place scatter adds (out is non-leaf, so
        # autograd tracks the in-place index_add_ fine and we avoid copies).
        out = x.features @ self.weight[self.center]
        for o, pair in enumerate(pairs):
            if pair is None or pair[0].numel() == 0:
                continue
            in_idx, out_idx = pair
            out.index_add_(0, out_idx, x.features[in_idx] @ self.weight[o])
        if self.bias is not None:
            out = out + self.bias
        return x.with_features(out)


class Linear1x1(nn.Module):
    """Pointwise (1x1x1) convolution over a sparse grid."""

    def __init__(self, in_channels, out_channels, bias=True, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(1, in_channels, out_channels, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=dtype)) if bias else None
        _init_conv_weight(self.weight, self.bias, in_channels)

    def forward(self, x: SparseTensor) -> SparseTensor:
        out = x.features @ self.weight[0]
        if self.bias is not None:
            out = out + self.bias
        return x.with_features(out)


class DownConv3d(nn.Module):
    """Stride-2, kernel-2 convolution onto the floor-divided parent grid."""

    def __init__(self, in_channels, out_channels, bias=True, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(8, in_channels, out_channels, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=dtype)) if bias else None
        _init_conv_weight(self.weight, self.bias, in_channels * 8)

    def forward(self, x: SparseTensor) -> SparseTensor:
        parent_topo, parent_idx, octant_rows = x.topo.downsample()
        out = x.features.new_zeros((parent_topo.num_voxels, self.weight.shape[-1]))
        for o in range(8):
            rows = octant_rows[o]
            if rows.numel() == 0:
                continue
            out.index_add_(0, parent_idx[rows], x.features[rows] @ self.weight[o])
        if self.bias is not None:
            out = out + self.bias
        return SparseTensor(parent_topo, out, x.stride * 2)


class UpConv3d(nn.Module):
    """Transposed stride-2 convolution restricted to a known child grid."""

    def __init__(self, in_channels, out_channels, bias=True, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(8, in_channels, out_channels, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=dtype)) if bias else None
        _init_conv_weight(self.weight, self.bias, in_channels * 8)

    def forward(self, parent: SparseTensor, child_topo: GridTopology,
                child_stride: int) -> SparseTensor:
        parent_topo, parent_idx, octant_rows = child_topo.downsample()
        if parent_topo.num_voxels != parent.topo.num_voxels:
            raise DataError("up-convolution parent grid does not match child grid")
        out = parent.features.new_zeros((child_topo.num_voxels, self.weight.shape[-1]))
        gathered = parent.features[parent_idx]
        for o in range(8):
            rows = octant_rows[o]
            if rows.numel() == 0:
                continue
            out.index_copy_(0, rows, gathered[rows] @ self.weight[o])
        if self.bias is not None:
            out = out + self.bias
        return SparseTensor(child_topo, out, child_stride)
