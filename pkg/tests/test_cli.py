import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fusion_vlm.checkpoint import load_tensors
from fusion_vlm.cli import main
from fusion_vlm.data import make_toy_sample, sample_to_record
from fusion_vlm.images import save_image

ROOT = Path(__file__).resolve().parents[1]
TOY = str(ROOT / "configs" / "toy.json")
FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# -- gradcheck ------------------------------------------------------------------------

def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--config", TOY)
    report = json.loads(out)
    assert code == 0 and report["passed"]
    assert set(report["by_latent_count"]) == {"4", "16"}
    for r in report["by_latent_count"].values():
        assert max(r["max_relative_error"].values()) < 1e-4 and r["failing_groups"] == []


def test_gradcheck_negative_control(capsys):
    code, out, _ = run(capsys, "gradcheck", "--config", TOY, "--corrupt", "mlp_t2v")
    report = json.loads(out)
    assert code == 1 and not report["passed"]
    assert all("mlp_t2v" in r["failing_groups"] for r in report["by_latent_count"].values())


def test_missing_config_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "gradcheck", "--config", tmp_path / "nope.json")
    assert code == 2 and "not found" in err


def test_unknown_config_key_is_usage_error(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"encoder": {"num_layerz": 4}}))
    code, _, _ = run(capsys, "gradcheck", "--config", bad)
    assert code == 2


def test_console_script_module_entry():
    res = subprocess.run([sys.executable, "-m", "fusion_vlm", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout


# -- train ---------------------------------------------------------------------------

def _small_config(tmp_path):
    cfg = tmp_path / "small.json"
    cfg.write_text(json.dumps({"seed": 0, "train": {"dataset_size": 6},
                               "stages": {"stage1": {"peak_lr": 1e-3, "batch_size": 2}}}))
    return cfg


def test_train_zero_steps_saves_initial_model(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--config", _small_config(tmp_path), "--steps", 0, "--out", tmp_path / "r")
    assert code == 0 and json.loads(out)["step"] == 0
    tensors, meta = load_tensors(tmp_path / "r" / "checkpoint.fvt")
    assert meta["stage"] == "stage1" and meta["total_steps"] == 0
    assert (tmp_path / "r" / "metrics.jsonl").read_text() == ""


def test_train_resume_is_bitwise(capsys, tmp_path):
    cfg = _small_config(tmp_path)
    assert run(capsys, "train", "--config", cfg, "--steps", 4, "--out", tmp_path / "full")[0] == 0
    assert run(capsys, "train", "--config", cfg, "--steps", 4, "--stop-after", 2, "--out", tmp_path / "half")[0] == 0
    code, out, _ = run(capsys, "train", "--resume", tmp_path / "half" / "checkpoint.fvt", "--out", tmp_path / "half")
    assert code == 0 and json.loads(out)["step"] == 4
    full = (tmp_path / "full" / "metrics.jsonl").read_text()
    assert (tmp_path / "half" / "metrics.jsonl").read_text() == full
    rows = json_lines(full)
    assert [r["step"] for r in rows] == [0, 1, 2, 3]
    assert all({"step", "l_ce", "l_v2t", "l_t2v", "l_total"} <= set(r) for r in rows)
    a, _ = load_tensors(tmp_path / "full" / "checkpoint.fvt")
    b, _ = load_tensors(tmp_path / "half" / "checkpoint.fvt")
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].numpy(), b[k].numpy()) for k in a)


def test_train_missing_resume_is_usage_error(capsys, tmp_path):
    assert run(capsys, "train", "--resume", tmp_path / "none.fvt", "--out", tmp_path)[0] == 2


# -- simulate --------------------------------------------------------------------------

@pytest.fixture()
def dialogues(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("\n".join(json.dumps(sample_to_record(make_toy_sample(0, i))) for i in range(2)) + "\n")
    return path


@pytest.mark.parametrize("count,side", [(4, 2), (16, 4), (64, 8), (144, 12), (256, 16)])
def test_simulate_latent_counts(capsys, dialogues, count, side):
    code, out, _ = run(capsys, "simulate", "--dialogues", dialogues, "--latent-count", count)
    rows = json_lines(out)
    assert code == 0 and rows
    assert all(r["latent_count"] == count and r["grid_side"] == side for r in rows)
    assert all(set(r["latent_refresh_norms"]) == {"2", "4"} for r in rows)


def test_simulate_interaction_off_and_reduced_tokens(capsys, dialogues):
    code, out, _ = run(capsys, "simulate", "--dialogues", dialogues, "--interaction", "off", "--global-tokens", 4)
    rows = json_lines(out)
    assert code == 0
    assert all(r["latent_refresh_norms"] == {} and r["global_tokens"] == 4 for r in rows)


@pytest.mark.parametrize("flag,value", [("--latent-count", 5), ("--global-tokens", 7)])
def test_simulate_rejects_non_square(capsys, dialogues, flag, value):
    assert run(capsys, "simulate", "--dialogues", dialogues, flag, value)[0] == 2


# -- filter ----------------------------------------------------------------------------

def test_filter_fixture_decisions(capsys):
    path = FIXTURES / "boundary_captions.jsonl"
    code, out, err = run(capsys, "filter", path)
    rows = json_lines(out)
    expected = json_lines(path.read_text())
    assert code == 0
    assert [r["decision"] for r in rows] == [e["expected_decision"] for e in expected]
    assert [r["reasons"] for r in rows] == [e["expected_reasons"] for e in expected]
    assert "outcome" in err and "keep" in err


def test_filter_threshold_override(capsys):
    path = FIXTURES / "boundary_captions.jsonl"
    _, out, _ = run(capsys, "filter", path, "--alnum-min", "0.0")
    by_id = {r["id"]: r for r in json_lines(out)}
    assert by_id["alnum-059"]["decision"] == "keep"


def test_filter_bad_records_and_images(capsys, tmp_path):
    img = np.zeros((8, 8, 3))
    save_image(tmp_path / "a.png", img)
    path = tmp_path / "r.jsonl"
    path.write_text("\n".join([
        "not json",
        json.dumps({"id": "no-text"}),
        json.dumps({"id": "ok", "text": "a young man and a little girl are sitting on the old wooden bench",
                    "image_path": "a.png", "qa": ["the square is red"]}),
    ]) + "\n")
    out_path = tmp_path / "out.jsonl"
    code, _, _ = run(capsys, "filter", path, "-o", out_path)
    rows = json_lines(out_path.read_text())
    assert code == 0
    assert [r["decision"] for r in rows[:2]] == ["error", "error"]
    assert rows[2]["decision"] in ("keep", "reject")
    assert "qa_final_score" in rows[2]["metrics"] and "clip_score" in rows[2]["metrics"]


def test_filter_empty_input(capsys, tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    code, out, _ = run(capsys, "filter", path)
    assert code == 0 and out == ""


# -- scoring -----------------------------------------------------------------------------

def test_score_image(capsys, tmp_path):
    img = np.zeros((8, 8, 3))
    img[4:, 4:] = 1.0
    save_image(tmp_path / "q.png", img)
    code, out, _ = run(capsys, "score-image", "--image", tmp_path / "q.png", "--crop-size", 8, "--clip-score", 0.25)
    score = json.loads(out)
    assert code == 0
    assert score["ssim_a"] == 2.0 and score["total"] == 1.25
    assert set(score["ssim_s"]) == {"1,1", "1,2", "2,1", "2,2"}
    assert run(capsys, "score-image", "--image", tmp_path / "missing.png", "--crop-size", 8)[0] == 2


def test_score_qa(capsys, tmp_path):
    save_image(tmp_path / "q.png", np.full((8, 8, 3), 0.5))
    code, out, _ = run(capsys, "score-qa", "--image", tmp_path / "q.png", "--statement", "a", "--statement", "b")
    res = json.loads(out)
    assert code == 0 and res["statements"] == 2 and -1.0 <= res["final_score"] <= 1.0
