"""Synthetic desk-scale scenes: labeled point clouds plus ground-truth boxes.

A scene is a floor plane and four walls (background, labels -1) with a
handful of primitive objects (box / sphere / cylinder) resting on the floor.
Object points fill the primitive volume; the ground-truth box of an instance
is the tight axis-aligned bound of its sampled points. Scene and box files
use a versioned columnar text format that round-trips coordinates at full
precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, SceneInfeasibleError, SceneParseError
from .geometry import Box3D, box_gap

SCENE_MAGIC = "TD3D-SCENE v1"
PRED_MAGIC = "TD3D-PRED v1"

KNOWN_SHAPES = ("box", "sphere", "cylinder")
PLACEMENT_RETRIES = 1000


@dataclass
class PointCloud:
    """N points in meters with optional per-point labels (-1 = background)."""

    points: np.ndarray        # (N, 3) float64
    semantic_ids: np.ndarray  # (N,) int64
    instance_ids: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.semantic_ids = np.ascontiguousarray(self.semantic_ids, dtype=np.int64)
        self.instance_ids = np.ascontiguousarray(self.instance_ids, dtype=np.int64)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def num_instances(self) -> int:
        ids = self.instance_ids
        return int(ids.max()) + 1 if np.any(ids >= 0) else 0

    def validate(self):
        n = len(self)
        if n < 1:
            raise DataError("point cloud must contain at least one point")
        if self.points.shape != (n, 3):
            raise DataError("points must have shape (N, 3)")
        if self.semantic_ids.shape != (n,) or self.instance_ids.shape != (n,):
            raise DataError("label arrays must have shape (N,)")
        if not np.all(np.isfinite(self.points)):
            raise DataError("point coordinates must be finite")
        inst = self.instance_ids
        fg = inst >= 0
        if np.any(fg):
            present = np.unique(inst[fg])
            expected = np.arange(present.size)
            if not np.array_equal(present, expected):
                raise DataError("instance ids are not contiguous from 0")
            if np.any(self.semantic_ids[fg] < 0):
                raise DataError("instance points must carry a semantic id")
            for k in present:
                sems = np.unique(self.semantic_ids[inst == k])
                if sems.size != 1:
                    raise DataError(f"instance {k} mixes semantic ids {sems.tolist()}")

    def instance_indices(self, instance_id: int) -> np.ndarray:
        return np.flatnonzero(self.instance_ids == instance_id)


@dataclass
class SceneConfig:
    """Knobs for the synthetic scene generator."""

    room_extent: tuple[float, float, float] = (1.1, 1.1, 0.5)
    object_count_range: tuple[int, int] = (4, 7)
    shape_catalog: tuple[str, ...] = KNOWN_SHAPES
    # Per-kind (min, max) of the characteristic dimension in meters: box edge
    # lengths, sphere diameter, cylinder diameter/height.
    size_range: dict = field(default_factory=lambda: {
        "box": (0.2, 0.32),
        "sphere": (0.12, 0.18),
        "cylinder": (0.2, 0.3),
    })
    points_per_object_range: tuple[int, int] = (220, 450)
    floor_wall_point_count: int = 4500
    min_object_gap: float = 0.05
    seed: int = 0
    # Objects float in a height band above the floor voxel layer, scan-style
    # (think shelf clutter); keeps object voxels free of floor points.
    hover_range: tuple[float, float] = (0.06, 0.3)
    # Material thickness of crate/cup shells as a fraction of the footprint;
    # 0.5 or more makes box/cylinder objects solid.
    wall_fraction: float = 0.14
    # Stray "scan noise" blobs scattered through the air volume; background
    # labels, never intersecting an object primitive.
    dust_blob_count_range: tuple[int, int] = (40, 70)
    dust_blob_radius_range: tuple[float, float] = (0.02, 0.05)
    dust_points_per_blob_range: tuple[int, int] = (15, 40)

    @property
    def num_classes(self) -> int:
        return len(self.shape_catalog)

    def validate(self):
        ext = np.asarray(self.room_extent, dtype=np.float64)
        if ext.shape != (3,) or not np.all(ext > 0):
            raise ConfigError("room_extent must be three strictly positive values")
        lo, hi = self.object_count_range
        if lo > hi:
            raise ConfigError("object_count_range must satisfy min <= max")
        if hi < 1:
            raise ConfigError("object_count_range must allow at least one object")
        if not self.shape_catalog:
            raise ConfigError("shape_catalog must not be empty")
        for kind in self.shape_catalog:
            if kind not in KNOWN_SHAPES:
                raise ConfigError(f"unknown shape kind {kind!r}")
            if kind not in self.size_range:
                raise ConfigError(f"size_range missing entry for {kind!r}")
            smin, smax = self.size_range[kind]
            if not (0 < smin <= smax):
                raise ConfigError(f"size_range for {kind!r} must satisfy 0 < min <= max")
        plo, phi = self.points_per_object_range
        if not (1 <= plo <= phi):
            raise ConfigError("points_per_object_range must satisfy 1 <= min <= max")
        if self.floor_wall_point_count < 0:
            raise ConfigError("floor_wall_point_count must be non-negative")
        if self.min_object_gap < 0:
            raise ConfigError("min_object_gap must be non-negative")
        if not (0 <= self.hover_range[0] <= self.hover_range[1]):
            raise ConfigError("hover_range must satisfy 0 <= min <= max")
        if self.wall_fraction <= 0:
            raise ConfigError("wall_fraction must be positive")
        if self.dust_blob_count_range[0] > self.dust_blob_count_range[1] \
                or self.dust_blob_count_range[0] < 0:
            raise ConfigError("dust_blob_count_range must be a non-negative range")
        rlo, rhi = self.dust_blob_radius_range
        if not (0 < rlo <= rhi):
            raise ConfigError("dust_blob_radius_range must be positive")
        dlo, dhi = self.dust_points_per_blob_range
        if not (1 <= dlo <= dhi):
            raise ConfigError("dust_points_per_blob_range must satisfy 1 <= min <= max")


# Boxes are open crates and cylinders open cups: walls plus a bottom, the
# top face missing, material thickness derived from the footprint. A wall
# fraction of 0.5 or more fills the cavity entirely (solid objects).
WALL_MIN = 0.025


def _box_sdf(p: np.ndarray, dims: np.ndarray) -> np.ndarray:
    q = np.abs(p) - dims / 2.0
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _cylinder_sdf(p: np.ndarray, radius: float, height: float) -> np.ndarray:
    radial = np.hypot(p[:, 0], p[:, 1]) - radius
    axial = np.abs(p[:, 2]) - height / 2.0
    q = np.stack([radial, axial], axis=-1)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


@dataclass
class PlacedObject:
    """A placed primitive: kind, pose, and its nominal bounding box."""

    kind: str
    class_id: int
    center: np.ndarray  # (3,) nominal box center
    dims: np.ndarray    # (3,) nominal box size
    wall_fraction: float = 0.14

    @property
    def nominal_box(self) -> Box3D:
        return Box3D(center=self.center, size=self.dims)

    @property
    def wall_thickness(self) -> float:
        return max(WALL_MIN, self.wall_fraction * float(min(self.dims[0],
                                                            self.dims[1])))

    @property
    def is_hollow(self) -> bool:
        if self.kind == "sphere":
            return False
        return 2.0 * self.wall_thickness < min(self.dims[0], self.dims[1])

    def _cavity_sdf(self, p: np.ndarray) -> np.ndarray:
        """Signed distance to the open interior (crate/cup kinds only).

        The cavity starts one wall thickness above the object bottom and
        extends far past the top face, so the shell is walls plus bottom
        with the top open.
        """
        if not self.is_hollow:
            return np.full(p.shape[0] if p.ndim > 1 else 1, np.inf)
        t = self.wall_thickness
        depth = self.dims[2]
        # Cavity spans local z in [-depth/2 + t, 3*depth/2 + t].
        cavity_center = np.array([0.0, 0.0, depth / 2.0 + t])
        if self.kind == "box":
            inner = np.array([self.dims[0] - 2 * t, self.dims[1] - 2 * t,
                              2.0 * depth])
            return _box_sdf(p - cavity_center, inner)
        if self.kind == "cylinder":
            return _cylinder_sdf(p - cavity_center, self.dims[0] / 2.0 - t,
                                 2.0 * depth)
        return np.full(p.shape[0] if p.ndim > 1 else 1, np.inf)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Signed distance to the object material (negative inside it)."""
        p = np.asarray(points, dtype=np.float64) - self.center
        if p.ndim == 1:
            p = p[None]
        if self.kind == "box":
            outer = _box_sdf(p, self.dims)
        elif self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.dims[0] / 2.0
        elif self.kind == "cylinder":
            outer = _cylinder_sdf(p, self.dims[0] / 2.0, self.dims[2])
        else:
            raise ConfigError(f"unknown shape kind {self.kind!r}")
        return np.maximum(outer, -self._cavity_sdf(p))

    def cavity_points(self, points: np.ndarray) -> np.ndarray:
        """Signed distance to the interior cavity (inf for solid kinds)."""
        p = np.asarray(points, dtype=np.float64) - self.center
        if p.ndim == 1:
            p = p[None]
        return self._cavity_sdf(p)

    def sample_points(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "sphere":
            return _sample_sphere_volume(self.center, self.dims[0] / 2.0, count, rng)
        if self.kind not in ("box", "cylinder"):
            raise ConfigError(f"unknown shape kind {self.kind!r}")

        def sample_outer(m):
            if self.kind == "box":
                return _sample_box_volume(self.center, self.dims, m, rng)
            return _sample_cylinder_volume(self.center, self.dims[0] / 2.0,
                                           self.dims[2], m, rng)

        if not self.is_hollow:
            return sample_outer(count)
        # Rejection sampling of the shell material inside the outer solid.
        out = []
        need = count
        for _ in range(200):
            keep = sample_outer(max(need * 3, 32))
            keep = keep[self.surface_distance(keep) <= 0.0]
            out.append(keep[:need])
            need -= len(out[-1])
            if need <= 0:
                break
        pts = np.concatenate(out, axis=0)
        if pts.shape[0] < count:
            raise SceneInfeasibleError(
                f"could not sample shell points for {self.kind} dims {self.dims}")
        return pts


@dataclass
class SceneSample:
    """Full generator output: cloud, ground truth, and placed primitives."""

    cloud: PointCloud
    gt_boxes: list  # list of (Box3D, class_id)
    objects: list   # list of PlacedObject


def _sample_box_volume(center, dims, count, rng):
    return rng.uniform(-0.5, 0.5, size=(count, 3)) * dims + center


def _sample_sphere_volume(center, radius, count, rng):
    v = rng.normal(size=(count, 3))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    r = radius * np.cbrt(rng.uniform(0.0, 1.0, size=(count, 1)))
    return center + r * v


def _sample_cylinder_volume(center, radius, height, count, rng):
    theta = rng.uniform(0.0, 2.0 * math.pi, size=count)
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=count))
    z = rng.uniform(-height / 2.0, height / 2.0, size=count)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts + center


WALL_HEIGHT_FRACTION = 0.3  # walls are a low rim, not full-height planes


def _sample_background(extent, count, rng):
    """Floor plane plus four low rim walls, points distributed by area."""
    ex, ey, ez = extent
    wz = ez * WALL_HEIGHT_FRACTION
    areas = np.array([ex * ey, ey * wz, ey * wz, ex * wz, ex * wz])
    counts = rng.multinomial(count, areas / areas.sum())
    pts = []
    u = rng.uniform(size=(counts[0], 2))
    pts.append(np.stack([u[:, 0] * ex, u[:, 1] * ey, np.zeros(counts[0])], axis=1))
    for i, x_fixed in enumerate((0.0, ex)):
        m = counts[1 + i]
        u = rng.uniform(size=(m, 2))
        pts.append(np.stack([np.full(m, x_fixed), u[:, 0] * ey, u[:, 1] * wz], axis=1))
    for i, y_fixed in enumerate((0.0, ey)):
        m = counts[3 + i]
        u = rng.uniform(size=(m, 2))
        pts.append(np.stack([u[:, 0] * ex, np.full(m, y_fixed), u[:, 1] * wz], axis=1))
    return np.concatenate(pts, axis=0)


def _place_objects(config: SceneConfig, rng: np.random.Generator) -> list[PlacedObject]:
    ext = np.asarray(config.room_extent, dtype=np.float64)
    lo_n, hi_n = config.object_count_range
    n_objects = int(rng.integers(lo_n, hi_n + 1))
    placed: list[PlacedObject] = []
    wall_margin = max(config.min_object_gap, 0.02)
    for _ in range(n_objects):
        ok = False
        for _attempt in range(PLACEMENT_RETRIES):
            class_id = int(rng.integers(0, len(config.shape_catalog)))
            kind = config.shape_catalog[class_id]
            smin, smax = config.size_range[kind]
            if kind == "box":
                dims = rng.uniform(smin, smax, size=3)
            elif kind == "sphere":
                d = rng.uniform(smin, smax)
                dims = np.array([d, d, d])
            else:
                d = rng.uniform(smin, smax)
                h = rng.uniform(smin, smax)
                dims = np.array([d, d, h])
            half = dims / 2.0
            lo = half[:2] + wall_margin
            hi = ext[:2] - half[:2] - wall_margin
            z_lo = config.hover_range[0]
            z_hi = min(config.hover_range[1], ext[2] - dims[2] - wall_margin)
            if np.any(hi < lo) or z_hi < z_lo:
                continue
            xy = rng.uniform(lo, hi)
            z_base = rng.uniform(z_lo, z_hi)
            center = np.array([xy[0], xy[1], z_base + half[2]])
            candidate = PlacedObject(kind=kind, class_id=class_id,
                                     center=center, dims=dims,
                                     wall_fraction=config.wall_fraction)
            if all(box_gap(candidate.nominal_box, p.nominal_box) >= config.min_object_gap
                   for p in placed):
                placed.append(candidate)
                ok = True
                break
        if not ok:
            raise SceneInfeasibleError(
                f"scene infeasible: could not place object {len(placed)} after "
                f"{PLACEMENT_RETRIES} retries for config {config!r}")
    return placed


DUST_HALO_FRACTION = 0.65
DUST_HALO_SHELL = 0.05  # how far halo blobs may sit from the primitive surface
DUST_CLEARANCE = 0.002  # dust never penetrates a primitive


def _sample_dust(config: SceneConfig, objects: list, rng: np.random.Generator):
    """Stray scan-noise blobs: most hug object surfaces, the rest drift in
    the air. Points always stay strictly outside every primitive."""
    ext = np.asarray(config.room_extent, dtype=np.float64)
    lo_n, hi_n = config.dust_blob_count_range
    n_blobs = int(rng.integers(lo_n, hi_n + 1))
    chunks = []

    def clearance(points):
        if not objects:
            return np.full(len(points), np.inf)
        return np.min(np.stack([obj.surface_distance(points)
                                for obj in objects]), axis=0)

    def emit_blob(center, radius):
        m = int(rng.integers(config.dust_points_per_blob_range[0],
                             config.dust_points_per_blob_range[1] + 1))
        pts = _sample_sphere_volume(center, radius, m, rng)
        pts = pts[clearance(pts) > DUST_CLEARANCE]
        pts = pts[np.all((pts > 0.001) & (pts < ext - 0.001), axis=1)]
        if len(pts):
            chunks.append(pts)

    # Loose contents inside every crate/cup cavity.
    for obj in objects:
        if not obj.is_hollow or hi_n == 0:
            continue
        for _ in range(int(rng.integers(2, 4))):
            for _attempt in range(PLACEMENT_RETRIES):
                radius = rng.uniform(*config.dust_blob_radius_range)
                local = rng.uniform(-obj.dims / 2.0, obj.dims / 2.0)
                center = obj.center + local
                inside = float(obj.cavity_points(center[None])[0])
                below_rim = local[2] <= obj.dims[2] / 2.0 - radius
                if inside <= -(radius + 0.01) and below_rim:
                    emit_blob(center, radius)
                    break

    for _ in range(n_blobs):
        halo = objects and rng.uniform() < DUST_HALO_FRACTION
        for _attempt in range(PLACEMENT_RETRIES):
            radius = rng.uniform(*config.dust_blob_radius_range)
            if halo:
                obj = objects[int(rng.integers(0, len(objects)))]
                span = obj.dims / 2.0 + DUST_HALO_SHELL
                center = obj.center + rng.uniform(-span, span)
                d = float(obj.surface_distance(center[None])[0])
                if not (DUST_CLEARANCE < d < DUST_HALO_SHELL):
                    continue
            else:
                center = rng.uniform([0.0, 0.0, 0.02], ext - 0.02)
            if float(clearance(center[None])[0]) <= DUST_CLEARANCE:
                continue
            emit_blob(center, radius)
            break
    if not chunks:
        return np.zeros((0, 3))
    return np.concatenate(chunks, axis=0)


def generate_scene_detailed(config: SceneConfig) -> SceneSample:
    """Generate one labeled scene; deterministic for a given (config, seed)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    objects = _place_objects(config, rng)

    chunks, sem_chunks, inst_chunks, gt = [], [], [], []
    plo, phi = config.points_per_object_range
    for idx, obj in enumerate(objects):
        m = int(rng.integers(plo, phi + 1))
        pts = obj.sample_points(m, rng)
        chunks.append(pts)
        sem_chunks.append(np.full(m, obj.class_id, dtype=np.int64))
        inst_chunks.append(np.full(m, idx, dtype=np.int64))
        gt.append((Box3D.from_bounds(pts.min(axis=0), pts.max(axis=0)), obj.class_id))

    if config.floor_wall_point_count > 0:
        bg = _sample_background(config.room_extent, config.floor_wall_point_count, rng)
        chunks.append(bg)
        sem_chunks.append(np.full(len(bg), -1, dtype=np.int64))
        inst_chunks.append(np.full(len(bg), -1, dtype=np.int64))
    dust = _sample_dust(config, objects, rng)
    if len(dust):
        chunks.append(dust)
        sem_chunks.append(np.full(len(dust), -1, dtype=np.int64))
        inst_chunks.append(np.full(len(dust), -1, dtype=np.int64))

    if not chunks:
        raise SceneInfeasibleError(f"config produced an empty scene: {config!r}")
    cloud = PointCloud(points=np.concatenate(chunks, axis=0),
                       semantic_ids=np.concatenate(sem_chunks),
                       instance_ids=np.concatenate(inst_chunks))
    cloud.validate()
    return SceneSample(cloud=cloud, gt_boxes=gt, objects=objects)


def generate_scene(config: SceneConfig):
    """Public generator contract: (cloud, [(gt_box, class_id), ...])."""
    sample = generate_scene_detailed(config)
    return sample.cloud, sample.gt_boxes


def gt_instances_from_cloud(cloud: PointCloud):
    """Per-instance (class_id, point index array) pairs from the labels."""
    out = []
    for k in range(cloud.num_instances):
        idx = cloud.instance_indices(k)
        out.append((int(cloud.semantic_ids[idx[0]]), idx))
    return out


# ---------------------------------------------------------------------------
# Scene / boxes file IO
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_scene(cloud: PointCloud, path, num_classes: int | None = None):
    """Write the versioned columnar scene format; exact round trip."""
    cloud.validate()
    if num_classes is None:
        num_classes = int(cloud.semantic_ids.max()) + 1 if np.any(cloud.semantic_ids >= 0) else 0
    lines = [SCENE_MAGIC, f"{len(cloud)} {num_classes}"]
    for p, s, i in zip(cloud.points, cloud.semantic_ids, cloud.instance_ids):
        lines.append(f"{_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {int(s)} {int(i)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_scene(path) -> PointCloud:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SceneParseError(path, 1, "empty file")
    if lines[0] != SCENE_MAGIC:
        raise SceneParseError(path, 1, f"bad header {lines[0]!r}, expected {SCENE_MAGIC!r}")
    if len(lines) < 2:
        raise SceneParseError(path, 2, "missing point count line")
    head = lines[1].split()
    if len(head) != 2:
        raise SceneParseError(path, 2, f"expected 'N C', got {lines[1]!r}")
    try:
        n, num_classes = int(head[0]), int(head[1])
    except ValueError:
        raise SceneParseError(path, 2, f"expected integers 'N C', got {lines[1]!r}")
    if n < 1:
        raise SceneParseError(path, 2, "N must be at least 1")
    if len(lines) < 2 + n:
        raise SceneParseError(path, len(lines) + 1, f"expected {n} point lines")

    points = np.empty((n, 3), dtype=np.float64)
    sem = np.empty(n, dtype=np.int64)
    inst = np.empty(n, dtype=np.int64)
    for i in range(n):
        lineno = i + 3
        tokens = lines[2 + i].split()
        if len(tokens) != 5:
            raise SceneParseError(path, lineno, f"expected 5 columns, got {len(tokens)}")
        try:
            xyz = [float(t) for t in tokens[:3]]
            s, k = int(tokens[3]), int(tokens[4])
        except ValueError:
            raise SceneParseError(path, lineno, f"unparsable row {lines[2 + i]!r}")
        if not all(math.isfinite(v) for v in xyz):
            raise SceneParseError(path, lineno, "non-finite coordinate")
        points[i] = xyz
        sem[i], inst[i] = s, k
        if s >= num_classes:
            raise SceneParseError(path, lineno, f"semantic id {s} outside [0, {num_classes})")
        if k >= 0 and s < 0:
            raise SceneParseError(path, lineno, "instance point lacks a semantic id")

    fg = inst >= 0
    if np.any(fg):
        present = np.unique(inst[fg])
        expected = np.arange(present.size)
        if not np.array_equal(present, expected):
            missing = set(expected.tolist()) - set(present.tolist())
            bad = int(sorted(set(present.tolist()) - set(expected.tolist()))[0])
            lineno = int(np.flatnonzero(inst == bad)[0]) + 3
            raise SceneParseError(
                path, lineno,
                f"non-contiguous instance ids: {bad} present, {sorted(missing)} missing")
        for k in present:
            rows = np.flatnonzero(inst == k)
            sems = sem[rows]
            if np.unique(sems).size != 1:
                lineno = int(rows[np.flatnonzero(sems != sems[0])[0]]) + 3
                raise SceneParseError(path, lineno, f"instance {k} mixes semantic ids")
    cloud = PointCloud(points=points, semantic_ids=sem, instance_ids=inst)
    cloud.validate()
    return cloud


def write_boxes(boxes, path):
    """Sidecar ground-truth boxes: 'K' then 'cx cy cz sx sy sz class' rows."""
    lines = [str(len(boxes))]
    for box, class_id in boxes:
        c, s = box.center, box.size
        lines.append(" ".join([_fmt(c[0]), _fmt(c[1]), _fmt(c[2]),
                               _fmt(s[0]), _fmt(s[1]), _fmt(s[2]), str(int(class_id))]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_boxes(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SceneParseError(path, 1, "empty file")
    try:
        k = int(lines[0])
    except ValueError:
        raise SceneParseError(path, 1, f"expected box count, got {lines[0]!r}")
    if k < 0 or len(lines) < 1 + k:
        raise SceneParseError(path, len(lines) + 1, f"expected {k} box lines")
    out = []
    for i in range(k):
        lineno = i + 2
        tokens = lines[1 + i].split()
        if len(tokens) != 7:
            raise SceneParseError(path, lineno, f"expected 7 columns, got {len(tokens)}")
        try:
            vals = [float(t) for t in tokens[:6]]
            class_id = int(tokens[6])
        except ValueError:
            raise SceneParseError(path, lineno, f"unparsable row {lines[1 + i]!r}")
        if not all(math.isfinite(v) for v in vals):
            raise SceneParseError(path, lineno, "non-finite box parameter")
        if min(vals[3:]) <= 0:
            raise SceneParseError(path, lineno, "box size must be positive")
        out.append((Box3D(center=np.array(vals[:3]), size=np.array(vals[3:])), class_id))
    return out
