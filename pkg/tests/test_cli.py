import json
from pathlib import Path

import pytest

from incdet.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main


@pytest.fixture()
def tiny_config_path(tmp_path) -> Path:
    cfg = {
        "output_dir": str(tmp_path / "out"),
        "seed": 1,
        "shots": 2,
        "data": {"n_base_train": 24, "n_novel_pool": 40, "n_test": 8},
        "pretrain": {"epochs": 1},
        "base_ft": {"epochs": 1},
        "novel_ft": {"epochs": 1},
    }
    path = tmp_path / "desk.json"
    path.write_text(json.dumps(cfg))
    return path


def test_missing_config_exits_2(capsys, tmp_path):
    missing = tmp_path / "nope.json"
    code = main(["run-all", "--config", str(missing)])
    assert code == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_bad_json_exits_2(capsys, tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{oops")
    assert main(["run-all", "--config", str(path)]) == EXIT_CONFIG


def test_unknown_subcommand_exits_1(capsys):
    assert main(["explode", "--config", "x.json"]) == EXIT_USAGE


def test_missing_required_flag_exits_1(capsys):
    assert main(["run-all"]) == EXIT_USAGE


def test_run_all_writes_stable_artifacts(tiny_config_path, tmp_path):
    assert main(["run-all", "--config", str(tiny_config_path)]) == EXIT_OK
    out = tmp_path / "out"
    for name in ("pretrain.ckpt", "base_ft.ckpt", "novel_ft.ckpt", "report.json", "proposals.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert [p["phase"] for p in report["phases"]] == ["pretrain", "base_ft", "novel_ft"]


def test_run_all_deterministic_reports(tiny_config_path, tmp_path):
    assert main(["run-all", "--config", str(tiny_config_path)]) == EXIT_OK
    first = (tmp_path / "out" / "report.json").read_bytes()
    assert main(["run-all", "--config", str(tiny_config_path)]) == EXIT_OK
    assert (tmp_path / "out" / "report.json").read_bytes() == first


def test_no_selfsup_skips_base_ft(tiny_config_path, tmp_path):
    out2 = tmp_path / "nss"
    code = main([
        "run-all", "--config", str(tiny_config_path),
        "--no-selfsup", "--output-dir", str(out2),
    ])
    assert code == EXIT_OK
    report = json.loads((out2 / "report.json").read_text())
    assert [p["phase"] for p in report["phases"]] == ["pretrain", "novel_ft"]
    assert not (out2 / "base_ft.ckpt").exists()


def test_phase_subcommands_and_idempotency(tiny_config_path, tmp_path, caplog):
    assert main(["pretrain-base", "--config", str(tiny_config_path)]) == EXIT_OK
    ckpt = tmp_path / "out" / "pretrain.ckpt"
    assert ckpt.exists()
    stamp = ckpt.stat().st_mtime_ns
    # second invocation skips the finished artifact
    assert main(["pretrain-base", "--config", str(tiny_config_path)]) == EXIT_OK
    assert ckpt.stat().st_mtime_ns == stamp
    assert main(["finetune-base", "--config", str(tiny_config_path)]) == EXIT_OK
    assert main(["finetune-novel", "--config", str(tiny_config_path)]) == EXIT_OK
    assert main(["evaluate", "--config", str(tiny_config_path)]) == EXIT_OK
    assert (tmp_path / "out" / "eval.json").exists()


def test_gen_proposals_and_overlays(tiny_config_path, tmp_path):
    overlay = tmp_path / "overlays"
    code = main([
        "gen-proposals", "--config", str(tiny_config_path), "--overlay-dir", str(overlay),
    ])
    assert code == EXIT_OK
    payload = json.loads((tmp_path / "out" / "proposals.json").read_text())
    assert payload["categories"][0]["id"] == 5  # reserved proposal class
    for ann in payload["annotations"]:
        assert ann["category_id"] == 5
    assert len(list(overlay.glob("overlay_*.png"))) == 24


def test_gen_data_writes_coco_layout(tiny_config_path, tmp_path):
    assert main(["gen-data", "--config", str(tiny_config_path)]) == EXIT_OK
    for split_dir in ("base_train", "kshot", "test"):
        root = tmp_path / "out" / "data" / split_dir
        assert (root / "annotations.json").exists()
        assert (root / "manifest.json").exists()
        assert list((root / "images").glob("*.png"))


def test_report_renders_table(tiny_config_path, tmp_path, capsys):
    main(["run-all", "--config", str(tiny_config_path)])
    assert main(["report", "--config", str(tiny_config_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "pretrain" in out and "novel_ft" in out and "base AP" in out


def test_report_without_run_exits_3(tiny_config_path, tmp_path, capsys):
    cfg = json.loads(tiny_config_path.read_text())
    cfg["output_dir"] = str(tmp_path / "fresh")
    path = tmp_path / "fresh.json"
    path.write_text(json.dumps(cfg))
    assert main(["report", "--config", str(path)]) == EXIT_RUNTIME


def test_seed_and_shots_overrides(tiny_config_path, tmp_path):
    from incdet.cli import _build_parser, _load_experiment

    parser = _build_parser()
    args = parser.parse_args([
        "run-all", "--config", str(tiny_config_path), "--seed", "9", "--shots", "1",
        "--no-kd", "--unfreeze-novel",
    ])
    cfg = _load_experiment(args)
    assert cfg.seed == 9
    assert cfg.shots == 1
    assert cfg.no_kd is True
    assert cfg.novel_ft.trainable == ("all",)
