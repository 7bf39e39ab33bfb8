"""End-to-end checks of the command line surface.

Everything goes through main(argv) so the argparse wiring, exit codes,
and printed output are all exercised the way a shell user would see
them.
"""

import json
import os

import numpy as np
import pytest

from fusiondet.cli import main
from fusiondet.detection import Box3D
from fusiondet.evalkit import EvalConfig, average_precision
from fusiondet.kitti import parse_velodyne, save_boxes_json


def _json_tail(text: str):
    # log lines never contain a brace, so the payload starts at the
    # first one
    return json.loads(text[text.index("{"):])


def test_selftest_all_pass(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    passes = [ln for ln in lines if ln.startswith("PASS ")]
    assert len(passes) == 12
    assert not any(ln.startswith("FAIL") for ln in lines)
    assert lines[-1] == "12/12 checks passed"


def test_gradcheck_single_loss(capsys):
    assert main(["gradcheck", "--loss", "focal", "--trials", "2"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["trials"] == 2
    assert payload["ok"] is True
    assert set(payload["max_relative_error"]) == {"focal"}
    assert payload["max_relative_error"]["focal"] <= 1e-4


def test_gradcheck_reports_failure_on_tight_tolerance(capsys):
    code = main(["gradcheck", "--loss", "box", "--trials", "1",
                 "--tolerance", "1e-18"])
    assert code == 1
    assert json.loads(capsys.readouterr().out)["ok"] is False


def test_frame_pipeline(tmp_path, capsys):
    frame_dir = str(tmp_path / "frame")
    donor_dir = str(tmp_path / "donor")
    db_dir = str(tmp_path / "db")
    aug_path = str(tmp_path / "augmented.bin")

    assert main(["synth", "--out", frame_dir, "--seed", "1"]) == 0
    synth_info = json.loads(capsys.readouterr().out)
    assert synth_info["points"] == 256  # scaled preset budget
    assert synth_info["objects"] == 3
    for name in ("scene.bin", "image.png", "calib.txt", "labels.txt"):
        assert os.path.exists(os.path.join(frame_dir, name))

    # the database comes from a second frame so its recorded poses land
    # in the paste target's free space
    assert main(["synth", "--out", donor_dir, "--seed", "2"]) == 0
    capsys.readouterr()
    assert main(["makedb", "--frame", donor_dir, "--out", db_dir]) == 0
    db_info = json.loads(capsys.readouterr().out)
    assert db_info["objects"] >= 1
    assert os.path.exists(os.path.join(db_dir, "index.json"))

    scene = os.path.join(frame_dir, "scene.bin")
    calib = os.path.join(frame_dir, "calib.txt")
    labels = os.path.join(frame_dir, "labels.txt")
    assert main([
        "augment", "--scene", scene, "--db", db_dir, "--out", aug_path,
        "--labels", labels, "--calib", calib, "--seed", "2",
    ]) == 0
    record = json.loads(capsys.readouterr().out)
    assert len(record["pasted"]) >= 1
    with open(aug_path, "rb") as fh:
        augmented = parse_velodyne(fh.read())
    with open(scene, "rb") as fh:
        original = parse_velodyne(fh.read())
    pasted_points = sum(hi - lo for lo, hi in (p["points"] for p in record["pasted"]))
    assert len(augmented) == len(original) + pasted_points
    assert pasted_points > 0

    image = os.path.join(frame_dir, "image.png")
    assert main([
        "pairs", "--scene", scene, "--image", image, "--calib", calib,
        "--labels", labels, "--seed", "3",
    ]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert set(stats) == {
        "anchors", "positives", "negatives",
        "skipped_no_match", "skipped_no_negatives", "dropped_oob",
    }
    assert stats["anchors"] > 0
    assert stats["positives"] == stats["anchors"]
    assert stats["negatives"] > 0

    assert main(["project", "--calib", calib, "--points", scene]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "u,v,depth"
    assert len(lines) == 1 + len(original)
    first = [float(v) for v in lines[1].split(",")]
    assert len(first) == 3

    # the synth output feeds straight back into the backbone
    assert main(["forward", "--frame", frame_dir]) == 0
    out = capsys.readouterr().out
    assert "trace matches configuration" in out

    # full preset wants 16384 points, the frame has 256
    assert main(["forward", "--config", "full", "--frame", frame_dir]) == 2
    captured = capsys.readouterr()
    assert "config wants 16384" in captured.err


def test_forward_synthetic_default(capsys):
    assert main(["forward", "--config", "scaled", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "trace matches configuration" in out
    assert "forward time" in out


def test_overfit_short_run(capsys):
    assert main(["overfit", "--steps", "3", "--lr", "0.01"]) == 0
    out = capsys.readouterr().out
    step_lines = [ln for ln in out.splitlines() if ln.startswith("step ")]
    assert len(step_lines) == 3
    summary = _json_tail(out)
    assert set(summary) == {
        "first_total", "last_total", "seg_accuracy", "pair_stats",
    }
    assert np.isfinite(summary["first_total"])
    assert 0.0 <= summary["seg_accuracy"] <= 1.0


def _hand_case_files(tmp_path):
    gts = {"f": [Box3D(float(i) * 10.0, 0, 0, 1, 1, 1, 0.0) for i in range(3)]}
    dets = {
        "f": [
            Box3D(0.0, 0, 0, 1, 1, 1, 0.0, score=0.9),
            Box3D(100.0, 0, 0, 1, 1, 1, 0.0, score=0.8),
            Box3D(10.0, 0, 0, 1, 1, 1, 0.0, score=0.7),
        ]
    }
    dets_path = str(tmp_path / "dets.json")
    gts_path = str(tmp_path / "gts.json")
    save_boxes_json(dets_path, dets)
    save_boxes_json(gts_path, gts)
    return dets_path, gts_path, dets, gts


def test_eval_round_trip(tmp_path, capsys):
    dets_path, gts_path, dets, gts = _hand_case_files(tmp_path)
    prefix = str(tmp_path / "run")
    assert main([
        "eval", "--dets", dets_path, "--gts", gts_path,
        "--recall", "11", "--metric", "bev", "--out-prefix", prefix,
    ]) == 0
    out = capsys.readouterr().out
    table = json.loads(out.strip().splitlines()[-1])
    assert table["recall_positions"] == 11
    assert table["metric"] == "bev"
    direct, _ = average_precision(
        dets, gts, EvalConfig(recall_positions=11, metric="bev"), 0
    )
    assert table["ap"]["Car"] == pytest.approx(direct)
    assert table["ap"]["Car"] == pytest.approx(600.0 / 11.0)
    assert table["ap"]["Pedestrian"] is None
    assert "n/a (no ground truth)" in out

    csv_path = prefix + "_car_pr.csv"
    svg_path = prefix + "_car_pr.svg"
    assert os.path.exists(csv_path) and os.path.exists(svg_path)
    with open(csv_path) as fh:
        assert fh.readline().strip() == "recall,precision"
    assert not os.path.exists(prefix + "_pedestrian_pr.csv")


def test_missing_file_is_a_usage_error(tmp_path, capsys):
    ghost = str(tmp_path / "nope.bin")
    code = main(["project", "--calib", ghost, "--points", ghost])
    assert code == 2
    assert capsys.readouterr().err.startswith("error:")


def test_malformed_json_is_a_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2, 3]\n")
    code = main(["eval", "--dets", str(bad), "--gts", str(bad)])
    assert code == 2
    assert "expected an object" in capsys.readouterr().err


def test_makedb_without_objects(tmp_path, capsys):
    frame_dir = str(tmp_path / "frame")
    assert main(["synth", "--out", frame_dir, "--seed", "0"]) == 0
    capsys.readouterr()
    os.remove(os.path.join(frame_dir, "labels.txt"))
    code = main(["makedb", "--frame", frame_dir, "--out", str(tmp_path / "db")])
    assert code == 2
    assert "no labeled objects" in capsys.readouterr().err


def test_unknown_command_rejected():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
