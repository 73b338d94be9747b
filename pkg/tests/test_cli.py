import hashlib
import json
import subprocess
import sys

import pytest

from mvlabel.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from mvlabel.evalkit import gt_to_coco, load_ground_truth


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--episodes", "3", "--seed", "5", "--n-views", "12", "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def labels(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("labels")
    assert main(["generate", "--data", str(corpus), "--out", str(out), "--seed", "1"]) == EXIT_OK
    return out


def test_simulate_writes_manifests(corpus):
    summary = json.loads((corpus / "simulate_summary.json").read_text())
    assert summary["n_requested"] == 3 and summary["n_ok"] >= 1
    assert len(list(corpus.glob("*/manifest.json"))) == summary["n_ok"]
    assert (corpus / "world.json").exists()


def test_simulate_deterministic(corpus, tmp_path):
    again = tmp_path / "again"
    assert main(["simulate", "--episodes", "3", "--seed", "5", "--n-views", "12", "--out", str(again)]) == EXIT_OK
    assert tree_digest(again) == tree_digest(corpus)


def test_simulate_validation(tmp_path):
    assert main(["simulate", "--episodes", "0", "--out", str(tmp_path)]) == EXIT_VALIDATION
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"episodes": 1, "colour": "red"}))
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert main(["simulate", "--bogus-flag"]) == EXIT_VALIDATION


def test_generate_outputs(labels, corpus):
    summary = json.loads((labels / "summary.json").read_text())
    assert summary["n_ok"] == summary["n_episodes"] == len(list(corpus.glob("*/manifest.json")))
    doc = json.loads((labels / "labels_2d.json").read_text())
    assert doc["images"] and doc["annotations"]
    assert json.loads((labels / "labels_3d.json").read_text())


def test_generate_deterministic(labels, corpus, tmp_path):
    assert main(["generate", "--data", str(corpus), "--out", str(tmp_path), "--seed", "1"]) == EXIT_OK
    for name in ("labels_2d.json", "labels_3d.json"):
        assert (tmp_path / name).read_bytes() == (labels / name).read_bytes()


def test_generate_view_subsample(corpus, tmp_path):
    assert main(["generate", "--data", str(corpus), "--out", str(tmp_path), "--views", "5"]) == EXIT_OK
    doc = json.loads((tmp_path / "labels_2d.json").read_text())
    per_ep = {}
    for im in doc["images"]:
        per_ep.setdefault(im["episode_id"], []).append(im["view_index"])
    assert per_ep and all(len(v) == len(set(v)) == 5 for v in per_ep.values())


def test_generate_validation(tmp_path, corpus):
    assert main(["generate", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert main(["generate", "--data", str(corpus), "--out", str(tmp_path / "o"), "--views", "0"]) == EXIT_VALIDATION
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"segment": {"voxel": 1}}))
    assert main(["generate", "--data", str(corpus), "--out", str(tmp_path / "o"),
                 "--config", str(cfg)]) == EXIT_VALIDATION


def test_generate_all_episodes_fail(corpus, tmp_path):
    # a confidence threshold no detection reaches leaves every episode without a seed
    code = main(["generate", "--data", str(corpus), "--out", str(tmp_path), "--conf-threshold", "1.01"])
    assert code == EXIT_RUNTIME


def test_eval_report(labels, corpus, capsys):
    assert main(["eval", "--labels", str(labels), "--gt", str(corpus), "--sweep"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "mAP@0.5" in out and "sweep theta=0.50" in out
    report = json.loads((labels / "eval_report.json").read_text())
    assert set(report["labels"]) == {"0.5", "0.3"} and "labels_3d" in report
    counts = [r["tp"] + r["fp"] for r in report["sweep"]]
    assert counts == sorted(counts, reverse=True)


def test_eval_ground_truth_scores_one(corpus, tmp_path):
    gt2d, gt3d = load_ground_truth(corpus)
    (tmp_path / "labels_2d.json").write_text(json.dumps(gt_to_coco(gt2d)))
    boxes = [{**g.region.to_dict(), "episode_id": g.image_id} for g in gt3d]
    (tmp_path / "labels_3d.json").write_text(json.dumps(boxes))
    assert main(["eval", "--labels", str(tmp_path), "--gt", str(corpus), "--iou", "0.5", "--iou", "0.9"]) == EXIT_OK
    report = json.loads((tmp_path / "eval_report.json").read_text())
    assert all(r["map"] == 1.0 for r in report["labels"].values())
    assert report["labels_3d"]["map"] == 1.0


def test_eval_empty_labels_score_zero(corpus, tmp_path):
    doc = gt_to_coco(load_ground_truth(corpus)[0])
    doc["annotations"] = []
    (tmp_path / "labels_2d.json").write_text(json.dumps(doc))
    assert main(["eval", "--labels", str(tmp_path), "--gt", str(corpus)]) == EXIT_OK
    report = json.loads((tmp_path / "eval_report.json").read_text())
    assert all(r["map"] == 0.0 for r in report["labels"].values())


def test_eval_schema_errors(corpus, tmp_path, capsys):
    assert main(["eval", "--labels", str(tmp_path), "--gt", str(corpus)]) == EXIT_VALIDATION
    doc = gt_to_coco(load_ground_truth(corpus)[0])
    del doc["annotations"][0]["bbox"]
    (tmp_path / "labels_2d.json").write_text(json.dumps(doc))
    assert main(["eval", "--labels", str(tmp_path), "--gt", str(corpus)]) == EXIT_VALIDATION
    assert "annotations[0].bbox" in capsys.readouterr().err


def test_refine_poses_command(corpus, tmp_path):
    assert main(["refine-poses", "--data", str(corpus), "--out", str(tmp_path), "--refine",
                 "--min-views", "5"]) == EXIT_OK
    eps = sorted(tmp_path.glob("*/pose_filter.json"))
    assert len(eps) == len(list(corpus.glob("*/manifest.json")))
    res = json.loads(eps[0].read_text())
    manifest = json.loads((eps[0].parent / "manifest.json").read_text())
    assert len(manifest["frames"]) == len(res["retained"]) >= 5
    assert (eps[0].parent / "gt.json").exists()


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "mvlabel", "simulate", "--episodes", "0", "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_VALIDATION and "episodes" in r.stderr
