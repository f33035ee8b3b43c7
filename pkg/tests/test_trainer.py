import json

import numpy as np
import pytest
import torch

from deskseg.errors import CheckpointError, DataError, NumericError
from deskseg.pipeline import DecodeSettings, Pipeline
from deskseg.refiner import RefinerConfig
from deskseg.scene import SceneConfig, generate_scene
from deskseg.trainer import (SceneRecord, TrainConfig,
                             apply_checkpoint, augment_scene, fit,
                             load_checkpoint, make_optimizer,
                             pipeline_from_checkpoint, save_checkpoint,
                             train_step)


def tiny_records(n=4, seed=0, objects=(2, 3)):
    records = []
    for i in range(n):
        cfg = SceneConfig(object_count_range=objects,
                          points_per_object_range=(120, 200),
                          floor_wall_point_count=900, seed=seed + i)
        cloud, gt = generate_scene(cfg)
        records.append(SceneRecord(cloud=cloud, gt_boxes=gt, scene_id=f"t{i}"))
    return records


def tiny_pipeline(seed=0, levels=2):
    return Pipeline.build(
        num_classes=3, voxel_size=0.05, widths=(8, 16, 24, 32),
        decoder_width=12, head_levels=(1, 2),
        refiner_config=RefinerConfig(levels=levels, base_channels=8),
        decode=DecodeSettings(score_threshold=0.01, nms_iou=0.35,
                              max_proposals=16, pre_nms_limit=128),
        seed=seed)


def tiny_train_config(**kw):
    defaults = dict(epochs=2, batch_size=2, lr=1e-3, val_interval=2,
                    warmup_frac=0.5, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


def test_total_is_bit_exact_sum_every_step():
    records = tiny_records(3)
    pipeline = tiny_pipeline()
    cfg = tiny_train_config()
    opt = make_optimizer(pipeline, cfg)
    for i in range(4):
        br = train_step(records[:2], pipeline, opt, cfg, warmup=True)
        assert br.total == br.l_cls + br.l_reg + br.l_seg  # bitwise


def test_overfit_single_scene_loss_decreases():
    records = tiny_records(1)
    pipeline = tiny_pipeline(seed=1)
    cfg = tiny_train_config()
    opt = make_optimizer(pipeline, cfg)
    first = train_step(records, pipeline, opt, cfg, warmup=True)
    last = None
    for _ in range(199):
        last = train_step(records, pipeline, opt, cfg, warmup=True)
    assert last.total < first.total


def test_identical_seeds_produce_identical_loss_streams():
    def run():
        records = tiny_records(2, seed=5)
        pipeline = tiny_pipeline(seed=9)
        cfg = tiny_train_config()
        opt = make_optimizer(pipeline, cfg)
        return [train_step(records, pipeline, opt, cfg, warmup=True)
                for _ in range(3)]
    a = run()
    b = run()
    for x, y in zip(a, b):
        assert (x.l_cls, x.l_reg, x.l_seg, x.total) == \
            (y.l_cls, y.l_reg, y.l_seg, y.total)


def test_one_step_updates_backbone_heads_and_unet():
    records = tiny_records(1, seed=2)
    pipeline = tiny_pipeline(seed=3)
    cfg = tiny_train_config()
    opt = make_optimizer(pipeline, cfg)
    before = {name: p.detach().clone()
              for name, p in pipeline.named_parameters()}
    train_step(records, pipeline, opt, cfg, warmup=True)
    changed_groups = set()
    for name, p in pipeline.named_parameters():
        if not torch.equal(before[name], p.detach()):
            if name.startswith("refiner."):
                changed_groups.add("unet")
            elif "head" in name or "cls_" in name or "reg_" in name:
                changed_groups.add("heads")
            else:
                changed_groups.add("backbone")
    assert {"backbone", "heads", "unet"} <= changed_groups


def test_empty_batch_rejected():
    pipeline = tiny_pipeline()
    cfg = tiny_train_config()
    opt = make_optimizer(pipeline, cfg)
    with pytest.raises(DataError):
        train_step([], pipeline, opt, cfg)


def test_nonfinite_loss_aborts_with_scene_id():
    records = tiny_records(1, seed=4)
    pipeline = tiny_pipeline(seed=4)
    with torch.no_grad():
        pipeline.detector.cls_head.weight[0, 0, 0] = float("nan")
    cfg = tiny_train_config()
    opt = make_optimizer(pipeline, cfg)
    with pytest.raises(NumericError) as err:
        train_step(records, pipeline, opt, cfg)
    assert "t0" in str(err.value)


def test_lr_schedule_rescaled_fractions():
    cfg = TrainConfig(epochs=33)
    assert cfg.resolved_drops() == [28, 32]
    assert cfg.lr_at_epoch(1) == pytest.approx(1e-3)
    assert cfg.lr_at_epoch(28) == pytest.approx(1e-3)
    assert cfg.lr_at_epoch(29) == pytest.approx(1e-4)
    assert cfg.lr_at_epoch(32) == pytest.approx(1e-4)
    assert cfg.lr_at_epoch(33) == pytest.approx(1e-5)


def test_fit_writes_log_and_checkpoints(tmp_path):
    records = tiny_records(4, seed=6)
    pipeline = tiny_pipeline(seed=6)
    cfg = tiny_train_config(epochs=2, val_interval=1)
    result = fit(records[:3], records[3:], pipeline, cfg, num_classes=3,
                 log_path=tmp_path / "log.jsonl", ckpt_dir=tmp_path,
                 config_hash="cafe")
    assert len(result.log) == 2
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[-1])
    assert set(rec) == {"epoch", "l_cls", "l_reg", "l_seg", "total",
                        "val_AP", "val_AP50", "val_AP25", "wall_seconds"}
    assert (tmp_path / "last.ckpt").exists()
    assert (tmp_path / "last.ckpt.manifest").exists()
    manifest = (tmp_path / "last.ckpt.manifest").read_text()
    assert "config_hash cafe" in manifest
    assert "param detector.stem.weight" in manifest


def test_fit_rejects_empty_dataset():
    pipeline = tiny_pipeline()
    with pytest.raises(DataError):
        fit([], [], pipeline, tiny_train_config(), num_classes=3)


def test_fit_is_reproducible_modulo_wall_time(tmp_path):
    def run(tag):
        records = tiny_records(4, seed=8)
        pipeline = tiny_pipeline(seed=8)
        cfg = tiny_train_config(epochs=2, val_interval=2)
        return fit(records[:3], records[3:], pipeline, cfg, num_classes=3).log
    log_a = run("a")
    log_b = run("b")
    for ra, rb in zip(log_a, log_b):
        for key in ("epoch", "l_cls", "l_reg", "l_seg", "total",
                    "val_AP", "val_AP50", "val_AP25"):
            assert ra[key] == rb[key], key


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise(tmp_path):
    pipeline = tiny_pipeline(seed=11)
    cfg = tiny_train_config()
    path = tmp_path / "model.ckpt"
    save_checkpoint(pipeline, cfg, path, config_hash="beef")
    payload = load_checkpoint(path)
    clone = pipeline_from_checkpoint(payload)
    for (na, pa), (nb, pb) in zip(pipeline.named_parameters(),
                                  clone.named_parameters()):
        assert na == nb
        assert torch.equal(pa, pb)


def test_checkpoint_into_mismatched_config_fails(tmp_path):
    pipeline = tiny_pipeline(seed=12)
    path = tmp_path / "model.ckpt"
    save_checkpoint(pipeline, tiny_train_config(), path)
    payload = load_checkpoint(path)
    other = Pipeline.build(num_classes=3, voxel_size=0.05,
                           widths=(8, 16, 24, 32), decoder_width=16,
                           head_levels=(1, 2),
                           refiner_config=RefinerConfig(levels=2, base_channels=8))
    with pytest.raises(CheckpointError) as err:
        apply_checkpoint(other, payload)
    assert "detector." in str(err.value)


def test_corrupted_checkpoint_fails_cleanly(tmp_path):
    path = tmp_path / "broken.ckpt"
    path.write_bytes(b"this is not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_metrics_recompute_within_tolerance(tmp_path):
    records = tiny_records(5, seed=14)
    pipeline = tiny_pipeline(seed=14)
    cfg = tiny_train_config(epochs=2, val_interval=2, augment=False)
    fit(records[:3], records[3:], pipeline, cfg, num_classes=3,
        ckpt_dir=tmp_path)
    payload = load_checkpoint(tmp_path / "last.ckpt")
    assert payload["val_metrics"] is not None
    restored = pipeline_from_checkpoint(payload)
    from deskseg.trainer import evaluate_pipeline
    report = evaluate_pipeline(restored, records[3:], num_classes=3)
    assert abs(report.ap - payload["val_metrics"]["ap"]) < 1e-9
    assert abs(report.ap50 - payload["val_metrics"]["ap50"]) < 1e-9


def test_resume_continues_epoch_numbering(tmp_path):
    records = tiny_records(4, seed=15)
    pipeline = tiny_pipeline(seed=15)
    cfg = tiny_train_config(epochs=3, val_interval=3)
    fit(records[:3], records[3:], pipeline, cfg, num_classes=3,
        ckpt_dir=tmp_path)
    payload = load_checkpoint(tmp_path / "last.ckpt")

    resumed_pipeline = tiny_pipeline(seed=15)
    cfg2 = tiny_train_config(epochs=4, val_interval=4)
    result = fit(records[:3], records[3:], resumed_pipeline, cfg2,
                 num_classes=3, resume_from=payload)
    assert [r["epoch"] for r in result.log[-1:]] == [4]


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def test_augment_keeps_boxes_tight_and_labels():
    records = tiny_records(1, seed=16)
    rng = np.random.default_rng(0)
    aug = augment_scene(records[0], rng)
    assert len(aug.gt_boxes) == len(records[0].gt_boxes)
    for k, (box, class_id) in enumerate(aug.gt_boxes):
        assert class_id == records[0].gt_boxes[k][1]
        pts = aug.cloud.points[aug.cloud.instance_ids == k]
        np.testing.assert_allclose(box.lo, pts.min(axis=0))
        np.testing.assert_allclose(box.hi, pts.max(axis=0))
    # z coordinates are preserved by in-plane rotation/flips.
    np.testing.assert_allclose(aug.cloud.points[:, 2],
                               records[0].cloud.points[:, 2])
