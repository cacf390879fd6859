import json
import subprocess
import sys
import time
from importlib import resources
from pathlib import Path

import pytest
from PIL import Image

from conftest import write_toy_manifest
from dpiqa.cli import main
from dpiqa.config import build_config
from dpiqa.metrics import median

SMOKE = str(resources.files("dpiqa.resources").joinpath("smoke.cfg"))


@pytest.fixture(scope="module")
def trained(toy_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    start = time.perf_counter()
    code = main(["train-teacher", "--config", SMOKE, "--manifest", str(toy_manifest), "--splits", "1", "--seed", "7", "--output", str(out)])
    elapsed = time.perf_counter() - start
    assert code == 0
    return out, elapsed


def test_train_teacher_emits_report_quickly(trained):
    out, elapsed = trained
    assert elapsed <= 300
    report = json.loads((out / "report.json").read_text())
    assert report["dataset_id"] == "toy" and report["mode"] == "splits"
    assert len(report["splits"]) == 1 and report["splits"][0]["n_test"] == 4
    assert (out / "teacher_split0.pt").is_file()
    log = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert any("val_srcc" in r for r in log) and any("loss" in r for r in log)


def test_train_teacher_is_bit_reproducible(trained, toy_manifest, tmp_path):
    out, _ = trained
    code = main(["train-teacher", "--config", SMOKE, "--manifest", str(toy_manifest), "--splits", "1", "--seed", "7", "--output", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()
    assert (tmp_path / "train_log.jsonl").read_bytes() == (out / "train_log.jsonl").read_bytes()


def test_effective_config_reloads_identically(trained):
    out, _ = trained
    cfg = build_config(out / "config.cfg", environ={})
    assert cfg.run.seed == 7 and cfg.model.cond_width == 64
    assert cfg.to_text() == (out / "config.cfg").read_text()


def test_missing_manifest_is_a_validation_error(tmp_path, capsys):
    code = main(["train-teacher", "--config", SMOKE, "--output", str(tmp_path)])
    assert code == 1
    assert "data.train_manifest" in capsys.readouterr().err
    code = main(["train-teacher", "--config", SMOKE, "--manifest", str(tmp_path / "gone.csv"), "--output", str(tmp_path)])
    assert code == 1
    assert not (tmp_path / "report.json").exists()


def test_bad_override_is_a_validation_error(toy_manifest, tmp_path, capsys):
    code = main(["train-teacher", "--manifest", str(toy_manifest), "--set", "teacher.lr=fast", "--output", str(tmp_path)])
    assert code == 1 and "teacher.lr" in capsys.readouterr().err


def test_env_override_reaches_the_run(toy_manifest, tmp_path, monkeypatch):
    monkeypatch.setenv("DPIQA_TEACHER__MAX_STEPS", "2")
    monkeypatch.setenv("DPIQA_TEACHER__VAL_STEP", "1")
    code = main(["train-teacher", "--config", SMOKE, "--manifest", str(toy_manifest), "--splits", "1", "--output", str(tmp_path)])
    assert code == 0
    steps = [json.loads(line) for line in (tmp_path / "train_log.jsonl").read_text().splitlines() if '"loss"' in line]
    assert len(steps) == 2


def test_distill_reports_both_models(trained, toy_manifest, tmp_path):
    out, _ = trained
    code = main(["distill", "--config", SMOKE, "--manifest", str(toy_manifest), "--teacher", str(out / "teacher_split0.pt"), "--output", str(tmp_path), "--set", "student.max_steps=20"])
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert {"srcc", "plcc", "checkpoint_hash"} <= set(report["teacher"]) and {"srcc", "plcc"} <= set(report["student"])
    teacher_split = json.loads((out / "report.json").read_text())["splits"][0]
    assert report["split"]["seed"] == teacher_split["seed"] and report["split"]["n_test"] == teacher_split["n_test"]
    assert (tmp_path / "student.pt").is_file()
    assert len(list((tmp_path / "teacher_maps").rglob("*.pt"))) == 12


def test_distill_rejects_mismatched_teacher(trained, toy_manifest, tmp_path, capsys):
    out, _ = trained
    args = ["distill", "--config", SMOKE, "--manifest", str(toy_manifest), "--teacher", str(out / "teacher_split0.pt"), "--output", str(tmp_path)]
    assert main(args + ["--set", "model.cond_width=32"]) == 1
    assert "cond_width" in capsys.readouterr().err
    assert main(args + ["--set", "model.timestep=5"]) == 1
    assert "timestep" in capsys.readouterr().err
    tpl = tmp_path / "tpl.txt"
    tpl.write_text("scenes = other\ndistortions = other\nquality_levels = bad, good\n")
    assert main(args + ["--set", f"data.template={tpl}"]) == 1
    assert "template" in capsys.readouterr().err
    assert main(["distill", "--config", SMOKE, "--manifest", str(toy_manifest), "--teacher", str(tmp_path / "none.pt")]) == 1


def _images(toy_manifest):
    return [str(toy_manifest.parent / f"toy{i:02d}.png") for i in (3, 0, 11)]


def test_predict_scores_in_order_and_reproducibly(trained, toy_manifest, tmp_path, capsys):
    out, _ = trained
    ckpt = str(out / "teacher_split0.pt")
    imgs = _images(toy_manifest)
    assert main(["predict", ckpt, *imgs, "--output", str(tmp_path / "a.json")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert [line.split("\t")[0] for line in lines] == imgs
    assert main(["predict", ckpt, *imgs, "--output", str(tmp_path / "b.json")]) == 0
    a = json.loads((tmp_path / "a.json").read_text())
    assert [r["image"] for r in a["results"]] == imgs
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    single = tmp_path / "single.json"
    main(["predict", ckpt, imgs[1], "--output", str(single)])
    assert json.loads(single.read_text())["results"][0]["score"] == pytest.approx(a["results"][1]["score"], abs=1e-6)


def test_predict_saliency_pngs_beside_json(trained, toy_manifest, tmp_path):
    out, _ = trained
    imgs = _images(toy_manifest)
    target = tmp_path / "sub" / "p.json"
    assert main(["predict", str(out / "teacher_split0.pt"), *imgs, "--output", str(target), "--saliency"]) == 0
    pngs = sorted(p.name for p in target.parent.glob("*.png"))
    assert pngs == sorted(f"{Path(i).stem}_saliency.png" for i in imgs)
    im = Image.open(target.parent / pngs[0])
    assert im.mode == "L" and im.size == (128, 128)


def test_predict_unreadable_images(trained, toy_manifest, tmp_path):
    out, _ = trained
    ckpt = str(out / "teacher_split0.pt")
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    good = _images(toy_manifest)[0]
    assert main(["predict", ckpt, str(bad), good, "--output", str(tmp_path / "mixed.json")]) == 0
    res = json.loads((tmp_path / "mixed.json").read_text())["results"]
    assert "error" in res[0] and "score" in res[1]
    assert main(["predict", ckpt, str(bad), str(tmp_path / "missing.png"), "--output", str(tmp_path / "none.json")]) == 2
    assert all("error" in r for r in json.loads((tmp_path / "none.json").read_text())["results"])


def test_eval_single_manifest(trained, toy_manifest, tmp_path):
    out, _ = trained
    assert main(["eval", str(out / "teacher_split0.pt"), "--config", SMOKE, "--manifest", str(toy_manifest), "--output", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["mode"] == "splits" and len(report["splits"]) == 5
    assert report["median_srcc"] == median([s["srcc"] for s in report["splits"]])
    assert report["median_plcc"] == median([s["plcc"] for s in report["splits"]])


def test_eval_cross_dataset(trained, toy_manifest, tmp_path):
    out, _ = trained
    other = write_toy_manifest(tmp_path / "other", n=8, seed=5, dataset_id="other", name="other")
    assert main(["eval", str(out / "teacher_split0.pt"), "--manifest", str(toy_manifest), "--cross", str(other), "--output", str(tmp_path / "x.json")]) == 0
    report = json.loads((tmp_path / "x.json").read_text())
    assert report["mode"] == "cross_dataset"
    assert report["source_dataset_id"] == "toy" and report["dataset_id"] == "other"
    assert report["splits"][0]["n_test"] == 8


def test_saliency_command(trained, toy_manifest, tmp_path):
    out, _ = trained
    imgs = _images(toy_manifest)[:2]
    assert main(["saliency", str(out / "teacher_split0.pt"), *imgs, "--output-dir", str(tmp_path)]) == 0
    assert len(list(tmp_path.glob("*_saliency.png"))) == 2
    assert main(["saliency", str(out / "teacher_split0.pt"), str(tmp_path / "x.png"), "--output-dir", str(tmp_path)]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dpiqa.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("train-teacher", "distill", "predict", "eval", "saliency"):
        assert command in proc.stdout
