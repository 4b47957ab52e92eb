import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from mioir.cli import contact_sheet, main, run_tag
from mioir.dataio import load_png, save_png

SMALL_TRAIN = ["--periods", "1", "--iters", "2", "--batch", "2", "--patch", "8", "--channels", "4", "--blocks", "2", "--prompt-dim", "4"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    wd = tmp_path_factory.mktemp("wd")
    assert main(["--workdir", str(wd), "gt", "--count", "3", "--size", "24", "--seed", "1"]) == 0
    assert main(["--workdir", str(wd), "synth", "--tasks", "SBNJRHL", "--seed", "1"]) == 0
    return wd


def run(work, *argv):
    return main(["--workdir", str(work), *argv])


@pytest.mark.parametrize(
    "strategy,prompt,tag",
    [("sequential", "explicit", "mini-S+EP"), ("mixed", "none", "mini-M"), ("mixed", "adaptive", "mini-M+AP"), ("sequential", "none", "mini-S")],
)
def test_run_tags(strategy, prompt, tag):
    assert run_tag(strategy, prompt) == tag


def test_synth_only_requested_tasks(work, capsys):
    assert run(work, "synth", "--group", "out", "--tasks", "SL", "--out", "sl") == 0
    root = work / "sl" / "out_dis"
    assert sorted(p.name for p in root.iterdir() if p.is_dir()) == ["L", "S"]
    out = capsys.readouterr().out
    assert "6 records" in out and "sr_scale: all 8" in out


def test_synth_rerun_same_hash(work, capsys):
    digests = []
    for name in ("r1", "r2"):
        run(work, "synth", "--tasks", "NH", "--seed", "4", "--out", name)
        digests.append(hashlib.sha256((work / name / "in_dis" / "manifest.jsonl").read_bytes()).hexdigest())
        assert f"manifest sha256 {digests[-1]}" in capsys.readouterr().out
    assert digests[0] == digests[1]


def test_bad_task_letter_is_usage_error(work, capsys):
    assert run(work, "synth", "--tasks", "Q") == 1
    err = capsys.readouterr().err
    assert all(c in err for c in "SBNJRHL")


def test_unknown_command_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_runtime_failure_exit_2(work, capsys):
    assert run(work, "eval", "--checkpoint", "missing/final.ckpt") == 2


def test_luminance_first_sequence_warns_and_runs(work, capsys):
    assert run(work, "train", "--sequence", "LHRJNSB", "--periods", "7", *SMALL_TRAIN[2:], "--out", "runs/warn") == 0
    assert "warning" in capsys.readouterr().err
    assert (work / "runs" / "warn" / "final.ckpt").exists()


def test_train_default_dir_and_resolved_config(work):
    assert run(work, "train", "--strategy", "mixed", "--prompt", "ep", *SMALL_TRAIN) == 0
    d = work / "runs" / "mini-M+EP"
    assert (d / "final.ckpt").exists()
    cfg = json.loads((d / "train.resolved.json").read_text())["config"]
    assert cfg["tag"] == "mini-M+EP" and cfg["prompt"] == "explicit" and cfg["channels"] == 4


def test_eval_table_with_baseline(work, capsys):
    run(work, "train", "--strategy", "mixed", "--prompt", "none", *SMALL_TRAIN)
    run(work, "train", "--strategy", "sequential", "--prompt", "none", "--sequence", "SBNJRHL", "--periods", "7", *SMALL_TRAIN[2:])
    capsys.readouterr()
    rc = run(
        work, "eval", "--checkpoint", "mini-M=runs/mini-M/final.ckpt", "--checkpoint", "mini-S=runs/mini-S/final.ckpt", "--baseline", "mini-M", "--out", "rep"
    )
    assert rc == 0
    md = capsys.readouterr().out
    assert "Ipv." in md and "| baseline |" in md
    rep = json.loads((work / "rep" / "eval_in_dis.json").read_text())
    assert [r["tag"] for r in rep["rows"]] == ["mini-M", "mini-S"] and len(rep["columns"]) == 7


def test_eval_explicit_without_classifier_is_usage_error(work):
    run(work, "train", "--strategy", "mixed", "--prompt", "explicit", *SMALL_TRAIN, "--out", "runs/ep")
    assert run(work, "eval", "--checkpoint", "runs/ep/final.ckpt") == 1
    assert run(work, "eval", "--checkpoint", "runs/ep/final.ckpt", "--manual-tasks") == 0


def test_classifier_eval_untrained_near_chance(work, capsys):
    assert run(work, "classifier", "eval") == 0
    acc = float(capsys.readouterr().out.split()[1])
    assert abs(acc - 1 / 7) <= 3 * np.sqrt((1 / 7) * (6 / 7) / 21)


def test_prompt_interp_outputs(work, capsys):
    run(work, "train", "--strategy", "mixed", "--prompt", "explicit", *SMALL_TRAIN, "--out", "runs/ep2")
    img = np.random.default_rng(0).random((12, 12, 3))
    save_png(img, work / "img.png")
    rc = run(work, "prompt-interp", "--checkpoint", "runs/ep2/final.ckpt", "--task-a", "L", "--task-b", "R", "--alphas", "1,0,0.5", "--input", "img.png", "--out", "interp")
    assert rc == 0
    d = work / "interp"
    assert sorted(p.name for p in d.glob("alpha_*.png")) == ["alpha_0.000.png", "alpha_0.500.png", "alpha_1.000.png"]
    sheet = load_png(d / "contact_sheet.png")
    assert sheet.shape == (12, 4 * 12 + 3 * 2, 3)
    assert json.loads((d / "sweep.json").read_text())["alphas"] == [0.0, 0.5, 1.0]
    # panels appear in ascending alpha order after the input
    np.testing.assert_array_equal(sheet[:, 14 * 2 : 14 * 2 + 12], load_png(d / "alpha_0.500.png"))


def test_prompt_analyze_report(work, capsys):
    run(work, "train", "--strategy", "mixed", "--prompt", "adaptive", *SMALL_TRAIN, "--out", "runs/ap")
    assert run(work, "prompt-analyze", "--checkpoint", "runs/ap/final.ckpt", "--n-per-task", "4", "--out", "pa") == 0
    rep = json.loads((work / "pa" / "prompt_clusters_ap.json").read_text())
    assert rep["n_points"] == 28
    assert (work / "pa" / "prompt_clusters_ap.png").exists()


def test_config_file_and_flag_precedence(work):
    ini = work / "c.ini"
    ini.write_text("[gt]\ncount = 2\nsize = 16\n")
    assert run(work, "--config", str(ini), "gt", "--out", "gtc", "--size", "20") == 0
    files = sorted((work / "gtc").glob("*.png"))
    assert len(files) == 2 and load_png(files[0]).shape == (20, 20, 3)
    ini.write_text("[gt]\nbogus = 1\n")
    assert run(work, "--config", str(ini), "gt", "--out", "gtd") == 1


def test_seed_env_default(work, monkeypatch):
    monkeypatch.setenv("MIOIR_SEED", "7")
    run(work, "gt", "--count", "1", "--size", "16", "--out", "g7")
    assert json.loads((work / "g7" / "gt.resolved.json").read_text())["config"]["seed"] == 7
    run(work, "gt", "--count", "1", "--size", "16", "--seed", "7", "--out", "g7b")
    assert (work / "g7" / "gt_0000.png").read_bytes() == (work / "g7b" / "gt_0000.png").read_bytes()


def test_contact_sheet_layout():
    ims = [np.full((4, 5, 3), v) for v in (0.0, 0.5, 1.0)]
    sheet = contact_sheet(ims, pad=1)
    assert sheet.shape == (4, 17, 3)
    assert sheet[0, 6, 0] == 0.5 and sheet[0, 5, 0] == 1.0


def test_console_script_entry():
    r = subprocess.run([sys.executable, "-m", "mioir.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
