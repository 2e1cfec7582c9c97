"""Command-line entry point.

Subcommands mirror the protocol phases plus data/proposal utilities; every
run is driven by a JSON experiment config (see README for the schema). Exit
codes: 0 success, 1 usage error, 2 config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import (
    BASE_FT,
    NOVEL_FT,
    PRETRAIN,
    ConfigError,
    ExperimentConfig,
    load_config,
)
from .data import DatasetError, save_dataset
from .evaluation import evaluate
from .model import Detector, load_checkpoint, save_checkpoint
from .pipeline import (
    PhaseError,
    build_datasets,
    build_pseudo_source,
    finetune_base,
    finetune_novel,
    load_pseudo_annotations,
    pretrain_base,
    phase_config,
    run_protocol,
    save_pseudo_annotations,
    seed_everything,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("incdet")


class UsageError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(EXIT_USAGE, f"{self.prog}: error: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="incdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = (
        "gen-data",
        "gen-proposals",
        "pretrain-base",
        "finetune-base",
        "finetune-novel",
        "evaluate",
        "report",
        "run-all",
    )
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--shots", type=int, default=None, help="override K shots")
        p.add_argument("--no-kd", action="store_true", help="disable both distillation losses")
        p.add_argument("--no-selfsup", action="store_true", help="skip the self-supervised base fine-tuning phase")
        p.add_argument("--unfreeze-novel", action="store_true", help="train all parameter groups during novel fine-tuning")
        p.add_argument("--output-dir", default=None, help="override config output dir")
        p.add_argument("--overwrite", action="store_true", help="recompute artifacts that already exist")
        if name == "gen-proposals":
            p.add_argument("--overlay-dir", default=None, help="write proposal overlay images here")
        if name == "evaluate":
            p.add_argument("--checkpoint", default=None, help="checkpoint to evaluate (default: novel_ft.ckpt)")
    return parser


def _load_experiment(args) -> ExperimentConfig:
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.shots is not None:
        config = dataclasses.replace(config, shots=args.shots)
    if args.no_kd:
        config = dataclasses.replace(config, no_kd=True)
    if args.no_selfsup:
        config = dataclasses.replace(config, no_selfsup=True)
    if args.unfreeze_novel:
        novel = dataclasses.replace(config.novel_ft, trainable=("all",))
        config = dataclasses.replace(config, novel_ft=novel)
    if args.output_dir is not None:
        config = dataclasses.replace(config, output_dir=args.output_dir)
    return config


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_gen_data(config: ExperimentConfig, args) -> int:
    out = _out_dir(config) / "data"
    datasets = build_datasets(config)
    for name in ("base_train", "kshot", "test"):
        save_dataset(datasets[name], out / name)
        log.info("wrote %s (%d images)", out / name, len(datasets[name]))
    return EXIT_OK


def _proposals_path(config: ExperimentConfig) -> Path:
    return _out_dir(config) / "proposals.json"


def _ensure_proposals(config: ExperimentConfig, datasets, overwrite: bool) -> dict:
    path = _proposals_path(config)
    if path.exists() and not overwrite:
        return load_pseudo_annotations(path)
    source = build_pseudo_source(datasets["base_train"], config)
    sizes = {
        s.image_id: (s.image.shape[1], s.image.shape[0])
        for s in datasets["base_train"].samples
    }
    save_pseudo_annotations(source, sizes, config.model.pseudo_class, path)
    return load_pseudo_annotations(path)


def _cmd_gen_proposals(config: ExperimentConfig, args) -> int:
    datasets = build_datasets(config)
    source = _ensure_proposals(config, datasets, args.overwrite)
    n = sum(len(v) for v in source.values())
    log.info("wrote %s (%d pseudo boxes over %d images)", _proposals_path(config), n, len(source))
    if args.overlay_dir:
        _write_overlays(datasets["base_train"], source, Path(args.overlay_dir))
    return EXIT_OK


def _write_overlays(dataset, source, overlay_dir: Path) -> None:
    from PIL import Image, ImageDraw

    overlay_dir.mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        img = Image.fromarray(s.image).convert("RGB")
        draw = ImageDraw.Draw(img)
        h, w = s.image.shape[:2]
        for box in source[s.image_id].boxes.tolist():
            cx, cy, bw, bh = box
            draw.rectangle(
                [(cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h],
                outline=(255, 255, 0),
            )
        img.save(overlay_dir / f"overlay_{s.image_id:06d}.png")


def _cmd_pretrain(config: ExperimentConfig, args) -> int:
    out = _out_dir(config)
    target = out / "pretrain.ckpt"
    if target.exists() and not args.overwrite:
        log.info("%s exists; skipping (use --overwrite to redo)", target)
        return EXIT_OK
    datasets = build_datasets(config)
    seed_everything(config.seed)
    model = Detector(config.model)
    pretrain_base(model, datasets["base_train"], phase_config(config, PRETRAIN))
    save_checkpoint(model, target)
    log.info("wrote %s", target)
    return EXIT_OK


def _cmd_finetune_base(config: ExperimentConfig, args) -> int:
    out = _out_dir(config)
    target = out / "base_ft.ckpt"
    if target.exists() and not args.overwrite:
        log.info("%s exists; skipping (use --overwrite to redo)", target)
        return EXIT_OK
    model = load_checkpoint(out / "pretrain.ckpt", expected_config=config.model)
    datasets = build_datasets(config)
    pseudo = _ensure_proposals(config, datasets, overwrite=False)
    finetune_base(model, datasets["base_train"], pseudo, phase_config(config, BASE_FT))
    save_checkpoint(model, target)
    log.info("wrote %s", target)
    return EXIT_OK


def _cmd_finetune_novel(config: ExperimentConfig, args) -> int:
    out = _out_dir(config)
    target = out / "novel_ft.ckpt"
    if target.exists() and not args.overwrite:
        log.info("%s exists; skipping (use --overwrite to redo)", target)
        return EXIT_OK
    start = out / ("pretrain.ckpt" if config.no_selfsup else "base_ft.ckpt")
    student = load_checkpoint(start, expected_config=config.model)
    teacher = student.clone_frozen()
    datasets = build_datasets(config)
    finetune_novel(student, teacher, datasets["kshot"], phase_config(config, NOVEL_FT))
    save_checkpoint(student, target)
    log.info("wrote %s", target)
    return EXIT_OK


def _cmd_evaluate(config: ExperimentConfig, args) -> int:
    out = _out_dir(config)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "novel_ft.ckpt"
    model = load_checkpoint(ckpt)
    datasets = build_datasets(config)
    result = evaluate(model, datasets["test"])
    payload = result.to_dict()
    (out / "eval.json").write_text(json.dumps(payload, sort_keys=True, indent=2))
    print(json.dumps(payload, sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_report(config: ExperimentConfig, args) -> int:
    path = _out_dir(config) / "report.json"
    if not path.exists():
        raise PhaseError("report", f"no report at {path}; run `incdet run-all` first")
    report = json.loads(path.read_text())
    header = f"{'phase':<10} {'base AP':>8} {'AP50':>6} {'novel AP':>9} {'AP50':>6} {'all AP':>7} {'AP50':>6}"
    print(header)
    print("-" * len(header))
    for entry in report["phases"]:
        e = entry["eval"]
        print(
            f"{entry['phase']:<10} {e['base']['ap']:>8.3f} {e['base']['ap50']:>6.3f} "
            f"{e['novel']['ap']:>9.3f} {e['novel']['ap50']:>6.3f} "
            f"{e['all']['ap']:>7.3f} {e['all']['ap50']:>6.3f}"
        )
    return EXIT_OK


def _cmd_run_all(config: ExperimentConfig, args) -> int:
    report = run_protocol(config)
    final = report["phases"][-1]["eval"]
    log.info(
        "done: base AP50=%.3f novel AP50=%.3f all AP50=%.3f",
        final["base"]["ap50"], final["novel"]["ap50"], final["all"]["ap50"],
    )
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "gen-proposals": _cmd_gen_proposals,
    "pretrain-base": _cmd_pretrain,
    "finetune-base": _cmd_finetune_base,
    "finetune-novel": _cmd_finetune_novel,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "run-all": _cmd_run_all,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return exc.code
    try:
        config = _load_experiment(args)
        return _COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PhaseError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
