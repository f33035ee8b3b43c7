"""Flat key=value run configuration with strict typing and a stable hash.

Config files are plain text, one `key = value` per line, `#` comments.
Unknown keys are rejected; every value is parsed against its declared type.
The config hash is computed over the sorted canonical key=value lines, so it
is independent of key order in the file.
"""

from __future__ import annotations

import hashlib

from .errors import ConfigError
from .pipeline import DecodeSettings
from .refiner import RefinerConfig
from .scene import SceneConfig
from .trainer import TrainConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_tuple(item_parser, count=None):
    def parse(raw: str):
        parts = [p.strip() for p in str(raw).split(",") if p.strip() != ""]
        if count is not None and len(parts) != count:
            raise ValueError(f"expected {count} comma-separated values")
        return tuple(item_parser(p) for p in parts)
    return parse


def _parse_drops(raw: str):
    if str(raw).strip().lower() == "auto":
        return "auto"
    return _parse_tuple(int)(raw)


def _canon(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_canon(v) for v in value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


# key -> (default, parser). The parser doubles as the type check.
CONFIG_SPEC = {
    "seed": (0, int),
    # scene synthesis
    "room_extent": ((1.1, 1.1, 0.5), _parse_tuple(float, 3)),
    "object_count_range": ((4, 7), _parse_tuple(int, 2)),
    "shape_catalog": (("box", "sphere", "cylinder"), _parse_tuple(str)),
    "box_size_range": ((0.2, 0.32), _parse_tuple(float, 2)),
    "sphere_size_range": ((0.12, 0.18), _parse_tuple(float, 2)),
    "cylinder_size_range": ((0.2, 0.3), _parse_tuple(float, 2)),
    "points_per_object_range": ((220, 450), _parse_tuple(int, 2)),
    "floor_wall_point_count": (4500, int),
    "min_object_gap": (0.05, float),
    "hover_range": ((0.06, 0.3), _parse_tuple(float, 2)),
    "wall_fraction": (0.14, float),
    "dust_blob_count_range": ((60, 90), _parse_tuple(int, 2)),
    "dust_blob_radius_range": ((0.012, 0.03), _parse_tuple(float, 2)),
    "dust_points_per_blob_range": ((20, 45), _parse_tuple(int, 2)),
    "train_scenes": (200, int),
    "val_scenes": (40, int),
    # voxel grid / detector
    "voxel_size": (0.05, float),
    "backbone_widths": ((32, 64, 128, 256), _parse_tuple(int, 4)),
    "decoder_width": (32, int),
    "head_levels": ((1, 2, 3), _parse_tuple(int)),
    "score_threshold": (0.02, float),
    "nms_iou": (0.35, float),
    "max_proposals": (60, int),
    "pre_nms_limit": (512, int),  # 0 disables the cap
    # refiner
    "unet_levels": (4, int),
    "base_channels": (16, int),
    "iou_match_threshold": (0.25, float),
    "mask_threshold": (0.5, float),
    "gt_label_rule": ("any", str),
    # training
    "epochs": (33, int),
    "batch_size": (6, int),
    "lr": (0.001, float),
    "lr_drop_epochs": ("auto", _parse_drops),
    "lr_drop_factor": (0.1, float),
    "weight_decay": (0.0001, float),
    "clip_grad_norm": (10.0, float),
    "warmup_gt": (True, _parse_bool),
    "warmup_frac": (0.1, float),
    "augment": (True, _parse_bool),
    "val_interval": (8, int),
    "threads": (1, int),  # 0 keeps the torch default
    # evaluation / benchmarking
    "min_mask_size": (1, int),
    "bench_repeats": (5, int),
    # refiner-only retraining budget for the unet_levels ablation
    "ablate_refiner_epochs": (11, int),
}


class RunConfig:
    """Validated flat configuration; values accessible as attributes."""

    def __init__(self, items: dict | None = None):
        self._items = {k: default for k, (default, _) in CONFIG_SPEC.items()}
        for key, value in (items or {}).items():
            self.set(key, value)

    def set(self, key: str, value):
        if key not in CONFIG_SPEC:
            raise ConfigError(f"unknown config key {key!r}")
        _default, parser = CONFIG_SPEC[key]
        if isinstance(value, str):
            try:
                value = parser(value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        else:
            try:
                value = parser(_canon(value))
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        self._items[key] = value

    def __getattr__(self, key: str):
        items = object.__getattribute__(self, "_items")
        if key in items:
            return items[key]
        raise AttributeError(key)

    def items(self) -> dict:
        return dict(self._items)

    def config_hash(self) -> str:
        lines = sorted(f"{k}={_canon(v)}" for k, v in self._items.items())
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    def dump(self) -> str:
        return "\n".join(f"{k} = {_canon(v)}" for k, v in sorted(self._items.items()))

    # Derived structured configs -------------------------------------------

    def scene_config(self, seed: int | None = None) -> SceneConfig:
        return SceneConfig(
            room_extent=self.room_extent,
            object_count_range=self.object_count_range,
            shape_catalog=self.shape_catalog,
            size_range={
                "box": self.box_size_range,
                "sphere": self.sphere_size_range,
                "cylinder": self.cylinder_size_range,
            },
            points_per_object_range=self.points_per_object_range,
            floor_wall_point_count=self.floor_wall_point_count,
            min_object_gap=self.min_object_gap,
            hover_range=self.hover_range,
            wall_fraction=self.wall_fraction,
            dust_blob_count_range=self.dust_blob_count_range,
            dust_blob_radius_range=self.dust_blob_radius_range,
            dust_points_per_blob_range=self.dust_points_per_blob_range,
            seed=self.seed if seed is None else seed)

    def refiner_config(self, levels: int | None = None) -> RefinerConfig:
        return RefinerConfig(
            levels=self.unet_levels if levels is None else levels,
            base_channels=self.base_channels,
            iou_match_threshold=self.iou_match_threshold,
            mask_threshold=self.mask_threshold,
            gt_label_rule=self.gt_label_rule)

    def decode_settings(self) -> DecodeSettings:
        return DecodeSettings(
            score_threshold=self.score_threshold,
            nms_iou=self.nms_iou,
            max_proposals=self.max_proposals,
            pre_nms_limit=self.pre_nms_limit if self.pre_nms_limit > 0 else None)

    def refiner_train_config(self) -> TrainConfig:
        cfg = self.train_config()
        cfg.epochs = self.ablate_refiner_epochs
        cfg.lr_drop_epochs = None  # re-derive drops from the fractions
        return cfg

    def train_config(self) -> TrainConfig:
        drops = self.lr_drop_epochs
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_drop_epochs=None if drops == "auto" else drops,
            lr_drop_factor=self.lr_drop_factor,
            seed=self.seed,
            weight_decay=self.weight_decay,
            clip_grad_norm=self.clip_grad_norm,
            warmup_gt=self.warmup_gt,
            warmup_frac=self.warmup_frac,
            augment=self.augment,
            val_interval=self.val_interval)

    @property
    def num_classes(self) -> int:
        return len(self.shape_catalog)


def parse_config_text(text: str, path: str = "<config>") -> dict:
    """Raw key -> string-value pairs from `key = value` lines."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            for key, value in parse_config_text(fh.read(), path).items():
                cfg.set(key, value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg
