#!/usr/bin/env python3
"""Run the desk-scale ablation grid over several seeds and print the trends:
full method vs --no-kd, vs --no-selfsup, and vs unfreezing the
class-agnostic groups during novel fine-tuning.

Shared phases are reused per seed: pre-training and base fine-tuning run
once, then each novel-phase variant starts from the appropriate checkpoint.

Usage:
    python scripts/run_ablations.py [--config configs/desk.json] [--seeds 0 1 2]
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from incdet.config import BASE_FT, NOVEL_FT, PRETRAIN, load_config
from incdet.evaluation import evaluate
from incdet.model import Detector, load_checkpoint, save_checkpoint
from incdet.pipeline import (
    build_datasets,
    build_pseudo_source,
    finetune_base,
    finetune_novel,
    phase_config,
    pretrain_base,
    seed_everything,
)


def run_seed(config, seed: int, out_root: Path) -> dict:
    config = dataclasses.replace(config, seed=seed, output_dir=str(out_root / f"seed{seed}"))
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = build_datasets(config)

    seed_everything(config.seed)
    model = Detector(config.model)
    pretrain_base(model, datasets["base_train"], phase_config(config, PRETRAIN))
    save_checkpoint(model, out / "pretrain.ckpt")
    pretrain_eval = evaluate(model, datasets["test"]).to_dict()

    pseudo = build_pseudo_source(datasets["base_train"], config)
    finetune_base(model, datasets["base_train"], pseudo, phase_config(config, BASE_FT))
    save_checkpoint(model, out / "base_ft.ckpt")
    base_ft_eval = evaluate(model, datasets["test"]).to_dict()

    def novel(start: str, no_kd=False, unfreeze=False) -> dict:
        student = load_checkpoint(out / start)
        teacher = student.clone_frozen()
        variant_cfg = dataclasses.replace(config, no_kd=no_kd)
        pc = phase_config(variant_cfg, NOVEL_FT)
        if unfreeze:
            pc.trainable = ("all",)
        finetune_novel(student, teacher, datasets["kshot"], pc)
        return evaluate(student, datasets["test"]).to_dict()

    results = {
        "pretrain": pretrain_eval,
        "base_ft": base_ft_eval,
        "full": novel("base_ft.ckpt"),
        "no_kd": novel("base_ft.ckpt", no_kd=True),
        "unfrozen": novel("base_ft.ckpt", unfreeze=True),
        "no_selfsup": novel("pretrain.ckpt"),
    }
    (out / "ablations.json").write_text(json.dumps(results, sort_keys=True, indent=2))
    return results


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/desk.json")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--output-dir", default="runs/ablations")
    args = parser.parse_args()

    config = load_config(args.config)
    out_root = Path(args.output_dir)
    all_results = {}
    for seed in args.seeds:
        t0 = time.time()
        all_results[seed] = run_seed(config, seed, out_root)
        print(f"seed {seed} done in {time.time() - t0:.0f}s", flush=True)

    print(f"\n{'seed':>4} {'variant':<12} {'base AP50':>9} {'novel AP50':>10} {'all AP50':>9}")
    for seed, res in all_results.items():
        for variant in ("base_ft", "full", "no_kd", "no_selfsup", "unfrozen"):
            e = res[variant]
            print(f"{seed:>4} {variant:<12} {e['base']['ap50']:>9.3f} {e['novel']['ap50']:>10.3f} {e['all']['ap50']:>9.3f}")

    def votes(fn):
        return sum(fn(res) for res in all_results.values())

    n = len(all_results)
    print("\ntrends (majority over seeds):")
    print(f"  KD preserves base AP50:        {votes(lambda r: r['full']['base']['ap50'] >= r['no_kd']['base']['ap50'])}/{n}")
    print(f"  self-sup helps all-class AP50: {votes(lambda r: r['full']['all']['ap50'] >= r['no_selfsup']['all']['ap50'])}/{n}")
    print(f"  unfreezing degrades base AP50: {votes(lambda r: r['unfrozen']['base']['ap50'] < r['full']['base']['ap50'])}/{n}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
