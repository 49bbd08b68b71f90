import dataclasses
import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from layerlab.cli import build_parser, main
from layerlab.denoiser import ModelConfig, TrainConfig


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def synth(capsys, out, n=4, seed=0, extra=()):
    code, _, err = run(
        capsys, "synth", "--n", str(n), "--seed", str(seed), "--out", str(out), *extra
    )
    assert code == 0, err
    return out


def tree_bytes(root):
    return {
        p.relative_to(root): p.read_bytes()
        for p in sorted(Path(root).rglob("*"))
        if p.is_file()
    }


def test_synth_writes_manifest_and_run_json(tmp_path, capsys):
    out = synth(capsys, tmp_path / "data", n=3, seed=1)
    assert (out / "manifest.jsonl").is_file()
    payload = json.loads((out / "run.json").read_text())
    assert payload["command"] == "synth"
    assert payload["config"]["n"] == 3
    assert payload["config"]["seed"] == 1
    assert payload["version"].startswith("layerlab-")


def test_synth_requires_seed(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--n", "1", "--out", str(tmp_path / "x"))
    assert code == 3
    assert "error:invalid-config" in err


def test_synth_rerun_byte_identical(tmp_path, capsys):
    a = synth(capsys, tmp_path / "a", n=3, seed=5)
    b = synth(capsys, tmp_path / "b", n=3, seed=5)
    ta, tb = tree_bytes(a), tree_bytes(b)
    assert set(ta) == set(tb)
    for rel in ta:
        if rel.name == "run.json":
            continue  # records the differing output path
        assert ta[rel] == tb[rel], rel


def test_synth_workers_match_serial(tmp_path, capsys):
    a = synth(capsys, tmp_path / "a", n=4, seed=9)
    b = synth(capsys, tmp_path / "b", n=4, seed=9, extra=("--workers", "2"))
    ta, tb = tree_bytes(a), tree_bytes(b)
    for rel in ta:
        if rel.name == "run.json":
            continue
        assert ta[rel] == tb[rel], rel


def test_train_and_sample_roundtrip(tmp_path, capsys):
    data = synth(capsys, tmp_path / "data", n=2, seed=2)
    small = ("--dim", "32", "--depth", "1", "--heads", "2", "--steps", "2",
             "--batch-size", "1", "--warmup-steps", "1", "--sample-steps", "2")
    code, _, err = run(capsys, "train", "--manifest", str(data), "--seed", "0",
                       "--out", str(tmp_path / "run1"), *small)
    assert code == 0, err
    assert (tmp_path / "run1" / "checkpoint.bin").is_file()
    assert (tmp_path / "run1" / "loss_log.jsonl").is_file()
    code, _, err = run(capsys, "train", "--manifest", str(data), "--seed", "0",
                       "--out", str(tmp_path / "run2"), *small)
    assert code == 0, err
    assert filecmp.cmp(tmp_path / "run1" / "checkpoint.bin",
                       tmp_path / "run2" / "checkpoint.bin", shallow=False)

    mask = next((tmp_path / "data").glob("*_mask.png"))
    bg = next((tmp_path / "data").glob("*_background.png"))
    code, _, err = run(capsys, "sample", "--checkpoint",
                       str(tmp_path / "run1" / "checkpoint.bin"),
                       "--mode", "fg_gen", "--caption", "a scene",
                       "--mask", str(mask), "--bg", str(bg),
                       "--steps", "2", "--seed", "0",
                       "--out", str(tmp_path / "samples"))
    assert code == 0, err
    assert (tmp_path / "samples" / "comp.png").is_file()
    assert (tmp_path / "samples" / "fg_ve.png").is_file()
    assert not (tmp_path / "samples" / "bg.png").exists()


def test_sample_missing_condition_exits_4(tmp_path, capsys):
    data = synth(capsys, tmp_path / "data", n=2, seed=3)
    run(capsys, "train", "--manifest", str(data), "--seed", "0",
        "--out", str(tmp_path / "run"), "--dim", "32", "--depth", "1",
        "--heads", "2", "--steps", "1", "--batch-size", "1", "--warmup-steps", "1")
    code, _, err = run(capsys, "sample", "--checkpoint",
                       str(tmp_path / "run" / "checkpoint.bin"),
                       "--mode", "fg_gen", "--out", str(tmp_path / "s"))
    assert code == 4
    assert "error:missing-input" in err


def test_missing_manifest_exits_4(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--manifest", str(tmp_path / "nope"),
                       "--seed", "0", "--out", str(tmp_path / "run"))
    assert code == 4
    assert "error:missing-input" in err


def test_every_model_and_train_field_reachable_as_train_flag():
    parser = build_parser()
    argv = ["train", "--manifest", "m", "--seed", "0"]
    args = parser.parse_args(argv)
    skip_train = {"seed", "modes", "betas"}  # seed/modes spelled differently, betas fixed
    for field in dataclasses.fields(ModelConfig):
        assert hasattr(args, field.name), field.name
    for field in dataclasses.fields(TrainConfig):
        if field.name in skip_train:
            continue
        assert hasattr(args, field.name), field.name
    assert hasattr(args, "modes")


def test_config_file_key_value_with_flag_override(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("n = 3\nseed = 7\n# comment\n")
    out = tmp_path / "data"
    code, _, err = run(capsys, "synth", "--config", str(cfg), "--seed", "8",
                       "--out", str(out))
    assert code == 0, err
    payload = json.loads((out / "run.json").read_text())
    assert payload["config"]["n"] == 3  # from the config file
    assert payload["config"]["seed"] == 8  # explicit flag wins


def test_config_file_json_and_run_json_reuse(tmp_path, capsys):
    first = synth(capsys, tmp_path / "a", n=3, seed=11)
    second = tmp_path / "b"
    code, _, err = run(capsys, "synth", "--config", str(first / "run.json"),
                       "--out", str(second))
    assert code == 0, err
    ta, tb = tree_bytes(first), tree_bytes(second)
    assert ta[Path("manifest.jsonl")] == tb[Path("manifest.jsonl")]


def test_invalid_config_file_exits_3(tmp_path, capsys):
    cfg = tmp_path / "bad.txt"
    cfg.write_text("this line has no equals sign\n")
    code, _, err = run(capsys, "synth", "--config", str(cfg), "--seed", "0",
                       "--out", str(tmp_path / "x"))
    assert code == 3
    assert "error:invalid-config" in err


def test_missing_config_file_exits_4(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--config", str(tmp_path / "nope.txt"),
                       "--seed", "0", "--out", str(tmp_path / "x"))
    assert code == 4


def test_curate_fit_score_filter_pipeline(tmp_path, capsys):
    fit_out = tmp_path / "curator"
    code, out_text, err = run(capsys, "curate", "fit", "--n", "20", "--seed", "4",
                              "--out", str(fit_out))
    assert code == 0, err
    assert (fit_out / "curator.json").is_file()
    report = json.loads((fit_out / "fit_report.json").read_text())
    assert report["train_samples"] + report["heldout_samples"] == 20

    data = synth(capsys, tmp_path / "data", n=4, seed=6,
                 extra=("--corrupt-fraction", "0.5"))
    comp = next(data.glob("*_composite.png"))
    mask = next(data.glob("*_mask.png"))
    bg = next(data.glob("*_background.png"))
    code, out_text, err = run(capsys, "curate", "score",
                              "--model", str(fit_out / "curator.json"),
                              "--composite", str(comp), "--mask", str(mask),
                              "--background", str(bg), "--out", str(tmp_path / "s"))
    assert code == 0, err
    assert 0.0 <= float(out_text.strip()) <= 1.0

    filt_out = tmp_path / "filtered"
    code, _, err = run(capsys, "curate", "filter",
                       "--model", str(fit_out / "curator.json"),
                       "--manifest", str(data), "--out", str(filt_out))
    assert code == 0, err
    report = json.loads((filt_out / "filter_report.json").read_text())
    assert report["kept"] + report["rejected"] == 4


def test_edit_report_without_scorer_has_null_gpt_score(tmp_path, capsys):
    out = tmp_path / "edits"
    code, _, err = run(capsys, "edit", "--n-scenes", "3", "--seed", "0",
                       "--out", str(out))
    assert code == 0, err
    report = json.loads((out / "edit_report.json").read_text())
    assert report["external_scores"]["gpt_score"] is None
    assert set(report["tasks"]) == {"R", "M", "C"}


def test_eval_fid_between_manifests(tmp_path, capsys):
    a = synth(capsys, tmp_path / "a", n=3, seed=1)
    code, out_text, err = run(capsys, "eval", "fid", "--dir-a", str(a),
                              "--dir-b", str(a), "--out", str(tmp_path / "fid"))
    assert code == 0, err
    report = json.loads((tmp_path / "fid" / "fid_report.json").read_text())
    assert report["fid"] < 1e-8


def test_ablate_writes_report(tmp_path, capsys):
    data = synth(capsys, tmp_path / "data", n=2, seed=2)
    out = tmp_path / "ablation"
    code, _, err = run(capsys, "ablate", "--manifest", str(data), "--seed", "0",
                       "--per-mode-steps", "1", "--dim", "32", "--depth", "1",
                       "--heads", "2", "--batch-size", "1", "--warmup-steps", "1",
                       "--out", str(out))
    assert code == 0, err
    report = json.loads((out / "ablation_report.json").read_text())
    assert set(report["arms"]) == {
        "unified", "separate_fg_gen", "separate_bg_gen", "separate_text2all"
    }
