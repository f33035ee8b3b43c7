"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Criteria 6-8 train real models on the standard synthetic benchmark
(200 train / 40 val scenes, seeds 0-2) and share them through a
session-scoped fixture; everything else is oracle- or property-based and
fast. Run with `-s` to see the per-criterion lines.
"""

import json

import numpy as np
import pytest
import torch

from deskseg.ablation import ablate_proposal_caps, retrain_refiner
from deskseg.config import RunConfig
from deskseg.data import standard_benchmark, synth_records
from deskseg.detector import (Proposal, assign_targets, greedy_nms,
                              _score_order)
from deskseg.errors import CheckpointError, SceneParseError
from deskseg.geometry import Box3D, box_iou
from deskseg.metrics import AP_THRESHOLDS, evaluate
from deskseg.pipeline import Pipeline
from deskseg.refiner import (InstanceMask, RefinerConfig, match_for_training,
                             predict_masks)
from deskseg.scene import (PointCloud, gt_instances_from_cloud, read_scene,
                           write_scene)
from deskseg.trainer import (TrainConfig, evaluate_pipeline, fit,
                             load_checkpoint, make_optimizer,
                             pipeline_from_checkpoint, save_checkpoint,
                             train_step)
from deskseg.voxels import extract_roi, voxelize

from gradcheck_utils import (check_module_grad, check_tensor_grad,
                             composite_loss_fn, random_focal_instance,
                             random_iou_instance, random_seg_instance,
                             tiny_pipeline, tiny_scene)
from oracles import (assignment_oracle, iou_scalar, matching_oracle,
                     nms_oracle, pr_metrics_oracle, roi_selection_oracle)

torch.set_num_threads(1)

SEEDS = (0, 1, 2)


def report(criterion: int, ok: bool, msg: str):
    print(f"\n[criterion {criterion:2d}] {'PASS' if ok else 'FAIL'} - {msg}")
    assert ok, f"criterion {criterion}: {msg}"


# ---------------------------------------------------------------------------
# Criterion 1: geometry oracles, >=1000 randomized instances each
# ---------------------------------------------------------------------------

def test_criterion_1_geometry_oracles():
    rng = np.random.default_rng(1001)

    # box_iou against scalar-arithmetic oracle, exact.
    for _ in range(1000):
        c1, c2 = rng.uniform(-1, 1, (2, 3))
        s1, s2 = rng.uniform(0.05, 1.2, (2, 3))
        a = Box3D(center=c1, size=s1)
        b = Box3D(center=c2, size=s2)
        assert box_iou(a, b) == iou_scalar(c1, s1, c2, s2)

    # extract_roi against the scalar containment oracle, exact.
    for _ in range(1000):
        pts = rng.uniform(-0.4, 0.4, size=(int(rng.integers(3, 40)), 3))
        cloud = PointCloud(points=pts, semantic_ids=np.full(len(pts), -1),
                           instance_ids=np.full(len(pts), -1))
        vs = float(rng.uniform(0.02, 0.15))
        grid = voxelize(cloud, vs)
        center = rng.uniform(-0.4, 0.4, 3)
        size = rng.uniform(0.05, 0.6, 3)
        roi = extract_roi(grid, Proposal(box=Box3D(center=center, size=size),
                                         class_id=0, score=1.0))
        assert roi.voxel_indices.tolist() == roi_selection_oracle(
            grid.coords, vs, center, size)

    # Greedy NMS against the quadratic oracle, exact kept sets.
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        boxes = np.column_stack([rng.uniform(0, 1, (n, 3)),
                                 rng.uniform(0.1, 0.6, (n, 3))])
        scores = rng.uniform(0, 1, n)
        tiekeys = rng.integers(0, 3, size=(n, 4))
        thr = float(rng.uniform(0.1, 0.9))
        order = _score_order(scores, tiekeys)
        assert greedy_nms(boxes, order, thr) == nms_oracle(
            boxes, scores, tiekeys, thr)

    # Target assignment against containment + volume-argmin + k-cap oracle.
    for _ in range(1000):
        gt = [(Box3D(center=rng.uniform(0.1, 0.9, 3),
                     size=rng.uniform(0.05, 0.5, 3)), int(rng.integers(0, 3)))
              for _ in range(int(rng.integers(0, 4)))]
        coords = np.unique(rng.integers(0, 8, size=(int(rng.integers(1, 30)), 3)),
                           axis=0)
        stride = int(rng.choice([1, 2, 4]))
        k_max = int(rng.integers(1, 20))
        tgt = assign_targets(gt, [(stride, coords)], voxel_size=0.06, k_max=k_max)
        labels, gt_idx = assignment_oracle(gt, coords, stride, 0.06, k_max)
        assert tgt.labels[0].tolist() == labels
        assert tgt.gt_index[0].tolist() == gt_idx

    # Training-time matching against the sequential claiming oracle.
    for _ in range(1000):
        gt = [(Box3D(center=rng.uniform(0, 1, 3), size=rng.uniform(0.1, 0.4, 3)),
               0) for _ in range(int(rng.integers(0, 5)))]
        props = [Proposal(box=Box3D(center=rng.uniform(0, 1, 3),
                                    size=rng.uniform(0.1, 0.4, 3)),
                          class_id=0, score=0.5)
                 for _ in range(int(rng.integers(0, 6)))]
        thr = float(rng.uniform(0, 0.5))
        res = match_for_training(gt, props, thr)
        want_pairs, want_unmatched = matching_oracle(
            [(g.center, g.size) for g, _ in gt],
            [(p.box.center, p.box.size) for p in props], thr)
        assert [(g, p) for g, p, _ in res.pairs] == \
            [(g, p) for g, p, _ in want_pairs]
        assert res.unmatched_gt == want_unmatched

    report(1, True, "extract_roi / box_iou / NMS / assignment / matching agree "
                    "exactly with brute-force oracles on 1000 instances each")


# ---------------------------------------------------------------------------
# Criterion 2: metric oracle on >=200 randomized toy cases
# ---------------------------------------------------------------------------

def _random_metric_case(rng, n_points=12):
    gts, preds = [], []
    for _ in range(2):
        scene_gt = []
        used = set()
        for _ in range(int(rng.integers(0, 6))):
            avail = [i for i in range(n_points) if i not in used]
            if len(avail) < 2:
                break
            take = rng.choice(avail, size=int(rng.integers(2, min(4, len(avail)) + 1)),
                              replace=False)
            used.update(take.tolist())
            scene_gt.append((int(rng.integers(0, 2)), np.sort(take)))
        scene_pred = []
        for _ in range(int(rng.integers(0, 9))):
            take = rng.choice(n_points, size=int(rng.integers(1, 6)), replace=False)
            m = np.zeros(n_points, bool)
            m[take] = True
            scene_pred.append(InstanceMask(
                point_mask=m, class_id=int(rng.integers(0, 2)),
                score=float(rng.choice([0.2, 0.4, 0.6, 0.8, 1.0]))))
        gts.append(scene_gt)
        preds.append(scene_pred)
    return preds, gts


def test_criterion_2_metric_oracle():
    rng = np.random.default_rng(2002)
    checked = 0
    trials = 0
    while checked < 200:
        trials += 1
        assert trials < 2000
        preds, gts = _random_metric_case(rng)
        if not any(gts):
            continue
        rep = evaluate(preds, gts, num_classes=2)
        o_preds = [[(m.class_id, m.score, set(np.flatnonzero(m.point_mask).tolist()))
                    for m in scene] for scene in preds]
        o_gts = [[(c, set(i.tolist())) for c, i in scene] for scene in gts]
        want = pr_metrics_oracle(o_preds, o_gts, list(AP_THRESHOLDS) + [0.25])
        assert rep.ap == pytest.approx(
            float(np.mean([want[t] for t in AP_THRESHOLDS])), abs=1e-12)
        assert rep.ap50 == pytest.approx(want[0.5], abs=1e-12)
        assert rep.ap25 == pytest.approx(want[0.25], abs=1e-12)
        assert rep.prec50 == pytest.approx(want["prec50"], abs=1e-12)
        assert rep.rec50 == pytest.approx(want["rec50"], abs=1e-12)
        assert rep.ap <= rep.ap50 + 1e-12 <= rep.ap25 + 2e-12
        checked += 1

    # Perfect predictions give exactly 1.0 everywhere.
    n = 30
    rng2 = np.random.default_rng(7)
    gts, preds = [], []
    for _ in range(3):
        a = rng2.choice(n, 6, replace=False)
        b = rng2.choice(np.setdiff1d(np.arange(n), a), 5, replace=False)
        gts.append([(0, np.sort(a)), (1, np.sort(b))])
        ma = np.zeros(n, bool); ma[a] = True
        mb = np.zeros(n, bool); mb[b] = True
        preds.append([InstanceMask(ma, 0, 1.0), InstanceMask(mb, 1, 1.0)])
    rep = evaluate(preds, gts, num_classes=2)
    assert (rep.ap, rep.ap50, rep.ap25, rep.prec50, rep.rec50) == (1, 1, 1, 1, 1)

    report(2, True, f"evaluate matches the exhaustive PR oracle exactly on "
                    f"{checked} toy cases; perfect predictions give 1.0; "
                    f"ap <= ap50 <= ap25 held on every case")


# ---------------------------------------------------------------------------
# Criterion 3: finite-difference gradient checks (64-bit, rel err < 1e-4)
# ---------------------------------------------------------------------------

def test_criterion_3_gradient_checks():
    rng = np.random.default_rng(3003)
    for name, maker in (("focal", random_focal_instance),
                        ("iou", random_iou_instance),
                        ("seg", random_seg_instance)):
        for _ in range(50):
            tensor, loss_fn = maker(rng)
            failures = check_tensor_grad(loss_fn, tensor, max_entries=6, rng=rng)
            assert failures == [], f"{name}: {failures[:3]}"

    # Composite loss through backbone + heads + U-Net parameters.
    for i in range(50):
        pipeline = tiny_pipeline(seed=100 + i, levels=1)
        record = tiny_scene(np.random.default_rng(200 + i))
        loss_fn = composite_loss_fn(pipeline, record)
        failures = check_module_grad(loss_fn,
                                     [pipeline.detector, pipeline.refiner],
                                     max_entries=1, rng=rng)
        assert failures == [], f"composite instance {i}: {failures[:3]}"

    report(3, True, "focal/iou/seg/composite losses match central finite "
                    "differences (rel err < 1e-4, float64) on 50 instances each")


# ---------------------------------------------------------------------------
# Criterion 4: loss decomposition is bit-exact every step
# ---------------------------------------------------------------------------

def test_criterion_4_loss_decomposition():
    records = synth_records(RunConfig({
        "object_count_range": "2,3", "points_per_object_range": "120,200",
        "floor_wall_point_count": "800", "dust_blob_count_range": "10,20"}),
        4, 4004)
    pipeline = Pipeline.build(num_classes=3, voxel_size=0.05,
                              widths=(8, 16, 24, 32), decoder_width=12,
                              head_levels=(1, 2),
                              refiner_config=RefinerConfig(levels=2, base_channels=8),
                              seed=44)
    cfg = TrainConfig(epochs=1, batch_size=2)
    opt = make_optimizer(pipeline, cfg)
    steps = 0
    for _ in range(3):
        for lo in range(0, len(records), 2):
            br = train_step(records[lo:lo + 2], pipeline, opt, cfg, warmup=True)
            assert br.total == br.l_cls + br.l_reg + br.l_seg  # bitwise
            steps += 1
    report(4, True, f"total == l_cls + l_reg + l_seg bit-exactly on all "
                    f"{steps} training steps")


# ---------------------------------------------------------------------------
# Criterion 5: ground-truth boxes + level-0 refiner sanity bar
# ---------------------------------------------------------------------------

def test_criterion_5_oracle_pipeline_sanity():
    # Well-separated solid objects: with exact boxes the bypass mask equals
    # the instance up to voxel quantization, which this criterion tolerates.
    cfg = RunConfig({"wall_fraction": "0.5", "min_object_gap": "0.12",
                     "room_extent": "1.3,1.3,0.5",
                     "object_count_range": "3,5",
                     "dust_blob_count_range": "8,15"})
    records = synth_records(cfg, 10, 5005)
    preds, gts = [], []
    for rec in records:
        grid = voxelize(rec.cloud, cfg.voxel_size)
        props = [Proposal(box=b, class_id=c, score=1.0) for b, c in rec.gt_boxes]
        preds.append(predict_masks(grid, props, RefinerConfig(levels=0), None))
        gts.append(gt_instances_from_cloud(rec.cloud))
    rep = evaluate(preds, gts, num_classes=3)
    ok = rep.ap25 == 1.0 and rep.ap50 >= 0.95
    report(5, ok, f"GT boxes + level-0 bypass on well-separated scenes: "
                  f"AP25 {rep.ap25:.3f} (= 1.0), AP50 {rep.ap50:.3f} (>= 0.95)")


# ---------------------------------------------------------------------------
# Criteria 6-8: trained trend experiments on the standard benchmark
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def trained_benchmark(tmp_path_factory):
    """Per seed: full default-budget training (levels=4) plus refiner-only
    retrains at levels 2 and 0 against the frozen detector."""
    cfg = RunConfig()
    out = {"cfg": cfg, "seeds": {}}
    for seed in SEEDS:
        run_cfg = RunConfig({"seed": str(seed)})
        train, val = standard_benchmark(run_cfg)
        pipeline = Pipeline.build(
            num_classes=run_cfg.num_classes, voxel_size=run_cfg.voxel_size,
            widths=run_cfg.backbone_widths, decoder_width=run_cfg.decoder_width,
            head_levels=run_cfg.head_levels,
            refiner_config=run_cfg.refiner_config(),
            decode=run_cfg.decode_settings(), seed=seed)
        tc = run_cfg.train_config()
        fit(train, val, pipeline, tc, num_classes=run_cfg.num_classes)
        levels = {}
        levels[4] = evaluate_pipeline(pipeline, val, run_cfg.num_classes)
        bypass = pipeline.with_refiner(None, run_cfg.refiner_config(levels=0))
        levels[0] = evaluate_pipeline(bypass, val, run_cfg.num_classes)
        two = retrain_refiner(pipeline, 2, train, tc, run_cfg.num_classes,
                              refiner_seed=seed)
        levels[2] = evaluate_pipeline(two, val, run_cfg.num_classes)
        out["seeds"][seed] = {"pipeline": pipeline, "val": val,
                              "train": train, "levels": levels}
        print(f"\n[benchmark seed {seed}] "
              + " ".join(f"L{k}: AP {levels[k].ap:.3f} AP50 {levels[k].ap50:.3f}"
                         for k in (0, 2, 4)))
    return out


def test_criterion_6_unet_depth_trend(trained_benchmark):
    seeds = trained_benchmark["seeds"]
    mean_ap = {lvl: float(np.mean([seeds[s]["levels"][lvl].ap for s in SEEDS]))
               for lvl in (0, 2, 4)}
    gap2 = mean_ap[2] - mean_ap[0]
    gap4 = mean_ap[4] - mean_ap[0]
    ok = gap2 >= 0.10 and gap4 >= 0.12
    report(6, ok, f"mean AP by U-Net depth: L0 {mean_ap[0]:.3f}, "
                  f"L2 {mean_ap[2]:.3f} (+{100 * gap2:.1f} >= 10), "
                  f"L4 {mean_ap[4]:.3f} (+{100 * gap4:.1f} >= 12)")


def test_criterion_7_proposal_count_trend(trained_benchmark):
    entry = trained_benchmark["seeds"][SEEDS[0]]
    rows = ablate_proposal_caps(entry["pipeline"], entry["val"],
                                num_classes=3, targets=(20, 60, 100, 140),
                                bench_scenes=12, repeats=4)
    runtimes = [r[2] for r in rows]
    aps = {r[0]: r[1] for r in rows}
    monotone = all(runtimes[i] <= runtimes[i + 1] for i in range(len(rows) - 1))
    ap_ok = (aps[60] - aps[20] >= 0) and (abs(aps[140] - aps[60]) <= 0.02)
    detail = ", ".join(f"cap {r[0]}: AP {r[1]:.3f} rt {r[2] * 1e3:.0f}ms "
                       f"(n~{r[3]:.0f})" for r in rows)
    report(7, monotone and ap_ok,
           f"runtime non-decreasing: {monotone}; AP60-AP20 "
           f"{100 * (aps[60] - aps[20]):+.2f} >= 0; |AP140-AP60| "
           f"{100 * abs(aps[140] - aps[60]):.2f} <= 2 [{detail}]")


def test_criterion_8_end_to_end_bar(trained_benchmark):
    seeds = trained_benchmark["seeds"]
    ap50s = {s: seeds[s]["levels"][4].ap50 for s in SEEDS}
    hits = sum(1 for v in ap50s.values() if v >= 0.75)
    detail = ", ".join(f"seed {s}: AP50 {v:.3f}" for s, v in ap50s.items())
    report(8, hits >= 2, f"default config reaches AP50 >= 0.75 on "
                         f"{hits}/3 seeds [{detail}]")


# ---------------------------------------------------------------------------
# Criterion 9: bitwise reproducibility of single-threaded runs
# ---------------------------------------------------------------------------

def test_criterion_9_reproducibility(tmp_path):
    overrides = {"train_scenes": "10", "val_scenes": "4", "epochs": "3",
                 "val_interval": "3", "threads": "1",
                 "object_count_range": "2,4",
                 "points_per_object_range": "150,250",
                 "floor_wall_point_count": "1500",
                 "dust_blob_count_range": "15,25"}

    def run(tag):
        cfg = RunConfig(dict(overrides, seed="3"))
        torch.set_num_threads(1)
        train, val = standard_benchmark(cfg)
        pipeline = Pipeline.build(
            num_classes=cfg.num_classes, voxel_size=cfg.voxel_size,
            widths=cfg.backbone_widths, decoder_width=cfg.decoder_width,
            head_levels=cfg.head_levels, refiner_config=cfg.refiner_config(),
            decode=cfg.decode_settings(), seed=cfg.seed)
        log_path = tmp_path / f"log_{tag}.jsonl"
        fit(train, val, pipeline, cfg.train_config(),
            num_classes=cfg.num_classes, log_path=log_path)
        rep = evaluate_pipeline(pipeline, val, cfg.num_classes)
        return log_path.read_text().splitlines(), rep

    log_a, rep_a = run("a")
    log_b, rep_b = run("b")
    assert len(log_a) == len(log_b)
    for la, lb in zip(log_a, log_b):
        da, db = json.loads(la), json.loads(lb)
        da.pop("wall_seconds")
        db.pop("wall_seconds")
        assert da == db  # exact float equality via JSON round trip
    same_report = (rep_a.ap == rep_b.ap and rep_a.ap50 == rep_b.ap50
                   and rep_a.ap25 == rep_b.ap25
                   and rep_a.prec50 == rep_b.prec50
                   and rep_a.rec50 == rep_b.rec50
                   and rep_a.per_class_ap == rep_b.per_class_ap)
    report(9, same_report, "two single-threaded runs produced identical "
                           "training logs (modulo wall time) and identical "
                           "evaluation reports")


# ---------------------------------------------------------------------------
# Criterion 10: persistence round trips and failure classes
# ---------------------------------------------------------------------------

def test_criterion_10_persistence(tmp_path):
    # Checkpoint: bitwise parameter round trip.
    pipeline = Pipeline.build(num_classes=3, voxel_size=0.05,
                              widths=(8, 16, 24, 32), decoder_width=12,
                              refiner_config=RefinerConfig(levels=2, base_channels=8),
                              seed=10)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(pipeline, TrainConfig(), ckpt, config_hash="feed")
    clone = pipeline_from_checkpoint(load_checkpoint(ckpt))
    bitwise = all(torch.equal(a, b) for (_, a), (_, b)
                  in zip(pipeline.named_parameters(), clone.named_parameters()))

    # Scene file: exact round trip.
    cfg = RunConfig({"object_count_range": "2,3",
                     "points_per_object_range": "150,250",
                     "floor_wall_point_count": "2000"})
    rec = synth_records(cfg, 1, 123)[0]
    spath = tmp_path / "scene.scene"
    write_scene(rec.cloud, spath, num_classes=3)
    back = read_scene(spath)
    scene_ok = (np.array_equal(back.points, rec.cloud.points)
                and np.array_equal(back.semantic_ids, rec.cloud.semantic_ids)
                and np.array_equal(back.instance_ids, rec.cloud.instance_ids))

    # Corrupted inputs fail with the specified error classes.
    bad_ckpt = tmp_path / "bad.ckpt"
    bad_ckpt.write_bytes(b"\x00garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad_ckpt)
    bad_scene = tmp_path / "bad.scene"
    bad_scene.write_text("NOPE\n")
    with pytest.raises(SceneParseError):
        read_scene(bad_scene)
    trunc = tmp_path / "trunc.scene"
    trunc.write_text("TD3D-SCENE v1\n5 1\n0 0 0 0 0\n")
    with pytest.raises(SceneParseError):
        read_scene(trunc)

    ok = bitwise and scene_ok
    report(10, ok, "checkpoints round-trip bitwise, scene files round-trip "
                   "exactly, corrupted inputs raise the specified errors")
