"""Full CLI pass on a miniature config: synth -> train -> eval -> ablate ->
bench, checking emitted files, figures, and exit codes."""

import csv
import json

import pytest

from deskseg.cli import main


TINY = {
    "train_scenes": "6", "val_scenes": "3",
    "object_count_range": "2,3",
    "points_per_object_range": "120,200",
    "floor_wall_point_count": "900",
    "dust_blob_count_range": "10,18",
    "backbone_widths": "8,16,24,32",
    "decoder_width": "12",
    "base_channels": "8",
    "unet_levels": "2",
    "epochs": "2",
    "val_interval": "2",
    "ablate_refiner_epochs": "1",
    "max_proposals": "12",
    "bench_repeats": "3",
}


def _sets(extra=()):
    out = []
    for k, v in TINY.items():
        out += ["--set", f"{k}={v}"]
    for item in extra:
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--seed", "1"]
                + _sets()) == 0
    assert main(["train", "--data", str(root / "data"),
                 "--out", str(root / "train"), "--seed", "1"] + _sets()) == 0
    return root


def test_train_outputs(workspace):
    out = workspace / "train"
    assert (out / "last.ckpt").exists()
    assert (out / "last.ckpt.manifest").exists()
    assert (out / "best.ckpt").exists()
    assert (out / "config.txt").exists()
    assert (out / "figures" / "loss_curves.png").stat().st_size > 0
    lines = (out / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    record = json.loads(lines[-1])
    assert record["epoch"] == 2
    assert record["val_AP"] is not None
    assert record["total"] == pytest.approx(
        record["l_cls"] + record["l_reg"] + record["l_seg"])


def test_eval_outputs(workspace, capsys):
    rc = main(["eval", "--data", str(workspace / "data"),
               "--checkpoint", str(workspace / "train" / "best.ckpt"),
               "--out", str(workspace / "eval"), "--seed", "1"] + _sets())
    assert rc == 0
    out = capsys.readouterr().out
    doc = json.loads(out[out.index("{"):])
    assert 0.0 <= doc["ap"] <= doc["ap50"] <= doc["ap25"] <= 1.0
    assert (workspace / "eval" / "report.json").exists()
    assert (workspace / "eval" / "figures" / "per_class_ap.png").exists()
    preds = sorted((workspace / "eval" / "preds").glob("*.pred"))
    assert len(preds) == 3
    assert preds[0].read_text().splitlines()[0] == "TD3D-PRED v1"


def test_eval_warns_on_hash_mismatch(workspace, capsys):
    rc = main(["eval", "--data", str(workspace / "data"),
               "--checkpoint", str(workspace / "train" / "best.ckpt"),
               "--out", str(workspace / "eval2"), "--seed", "2"] + _sets())
    assert rc == 0  # warning, not fatal
    assert "differs" in capsys.readouterr().err


def test_ablate_unet_levels(workspace):
    rc = main(["ablate", "--data", str(workspace / "data"),
               "--checkpoint", str(workspace / "train" / "best.ckpt"),
               "--axis", "unet_levels", "--values", "0,1",
               "--out", str(workspace / "ablate"), "--seed", "1"] + _sets())
    assert rc == 0
    with open(workspace / "ablate" / "ablation_unet_levels.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["unet_levels", "ap", "ap50", "ap25"]
    assert [r[0] for r in rows[1:]] == ["0", "1"]
    assert (workspace / "ablate" / "figures" / "ablation_unet_levels.png").exists()


def test_ablate_proposal_cap(workspace):
    rc = main(["ablate", "--data", str(workspace / "data"),
               "--checkpoint", str(workspace / "train" / "best.ckpt"),
               "--axis", "proposal_cap", "--values", "4,8",
               "--out", str(workspace / "ablate"), "--seed", "1"] + _sets())
    assert rc == 0
    with open(workspace / "ablate" / "ablation_proposal_cap.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "proposal_cap"
    assert len(rows) == 3


def test_ablate_unknown_axis(workspace):
    rc = main(["ablate", "--data", str(workspace / "data"),
               "--checkpoint", str(workspace / "train" / "best.ckpt"),
               "--axis", "nonsense", "--out", str(workspace / "x")] + _sets())
    assert rc == 2


def test_bench_outputs(workspace, capsys):
    rc = main(["bench", "--data", str(workspace / "data"),
               "--checkpoint", str(workspace / "train" / "best.ckpt"),
               "--out", str(workspace / "bench"), "--repeats", "3",
               "--seed", "1"] + _sets())
    assert rc == 0
    doc = json.loads((workspace / "bench" / "runtime.json").read_text())
    assert doc["median_s"] > 0
    assert doc["p90_s"] >= doc["median_s"]
    assert (workspace / "bench" / "figures" / "runtime.png").exists()
