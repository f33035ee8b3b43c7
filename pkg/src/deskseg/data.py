"""Dataset synthesis, on-disk layout, and loading.

A dataset directory holds a `manifest.json` plus scene/box file pairs under
`scenes/`. Scene i of a split draws its generator seed as base_seed + index
(validation offset by the training count), so datasets are reproducible
byte-for-byte from (config, seed).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .config import RunConfig
from .errors import DataError
from .scene import generate_scene, read_boxes, read_scene, write_boxes, write_scene
from .trainer import SceneRecord

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "deskseg-dataset-v1"


def synth_records(cfg: RunConfig, count: int, seed_base: int) -> list:
    """Generate `count` scene records with per-scene derived seeds."""
    records = []
    for i in range(count):
        scene_cfg = cfg.scene_config(seed=seed_base + i)
        cloud, gt = generate_scene(scene_cfg)
        records.append(SceneRecord(cloud=cloud, gt_boxes=gt,
                                   scene_id=f"seed{seed_base + i}"))
    return records


def standard_benchmark(cfg: RunConfig, seed: int | None = None):
    """The (train, val) in-memory dataset for a config; val seeds follow train."""
    base = cfg.seed if seed is None else seed
    train = synth_records(cfg, cfg.train_scenes, base)
    val = synth_records(cfg, cfg.val_scenes, base + cfg.train_scenes)
    return train, val


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset(out_dir, cfg: RunConfig, n_train: int, n_val: int,
                  force: bool = False) -> dict:
    """Write scene/box files plus a split manifest with content hashes."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    splits = {"train": [], "val": []}
    hashes = {}
    num_classes = cfg.num_classes
    for split, count, offset in (("train", n_train, 0), ("val", n_val, n_train)):
        for i in range(count):
            seed = cfg.seed + offset + i
            cloud, gt = generate_scene(cfg.scene_config(seed=seed))
            stem = f"{split}_{i:04d}"
            scene_path = scenes_dir / f"{stem}.scene"
            boxes_path = scenes_dir / f"{stem}.boxes"
            write_scene(cloud, scene_path, num_classes=num_classes)
            write_boxes(gt, boxes_path)
            splits[split].append(stem)
            hashes[f"scenes/{stem}.scene"] = _sha256(scene_path)
            hashes[f"scenes/{stem}.boxes"] = _sha256(boxes_path)
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "num_classes": num_classes,
        "splits": splits,
        "hashes": hashes,
    }
    with open(out / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no {MANIFEST_NAME} in {data_dir}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: unknown manifest format {manifest.get('format')!r}")
    return manifest


def load_dataset(data_dir, split: str = "train") -> list:
    """Load one split as SceneRecord list; missing files are reported together."""
    manifest = read_manifest(data_dir)
    if split not in manifest["splits"]:
        raise DataError(f"manifest has no split {split!r}")
    base = Path(data_dir)
    missing = []
    for stem in manifest["splits"][split]:
        for ext in (".scene", ".boxes"):
            p = base / "scenes" / f"{stem}{ext}"
            if not p.exists():
                missing.append(str(p))
    if missing:
        raise DataError("missing dataset files: " + ", ".join(missing))
    records = []
    for stem in manifest["splits"][split]:
        cloud = read_scene(base / "scenes" / f"{stem}.scene")
        gt = read_boxes(base / "scenes" / f"{stem}.boxes")
        records.append(SceneRecord(cloud=cloud, gt_boxes=gt, scene_id=stem))
    return records
