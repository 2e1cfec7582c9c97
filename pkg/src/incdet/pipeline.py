"""Three-phase training protocol: base pre-training, self-supervised base
fine-tuning with pseudo proposals, and incremental few-shot fine-tuning with
dual knowledge distillation.

Each phase seeds every RNG it touches, freezes everything outside its
trainable groups, and verifies at the end that the frozen parameters are
hash-identical to their phase-start values.
"""

from __future__ import annotations

import json
import logging
import random
from pathlib import Path

import numpy as np
import torch

from .config import (
    BASE_FT,
    NOVEL_FT,
    PRETRAIN,
    ExperimentConfig,
    PhaseConfig,
)
from .data import Dataset, generate_shapes, kshot_sample
from .distill import kd_losses
from .evaluation import evaluate
from .geometry import box_giou
from .losses import NO_OBJECT, W_CLS, W_GIOU, W_L1, focal_loss_matrix
from .matcher import GroundTruthSet, cost_matrix, hungarian_solve
from .model import (
    ALL_GROUPS,
    Detector,
    ModelOutput,
    checkpoint_payload,
    hash_params,
    save_checkpoint,
)
from .proposals import generate_proposals, prune_to_pseudo_gt

log = logging.getLogger("incdet")

LOG_EVERY = 25


class PhaseError(RuntimeError):
    """A training phase failed; the message names the phase."""

    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


class PseudoAnnotationsMissingError(PhaseError):
    def __init__(self, image_id: int):
        super().__init__(BASE_FT, f"no pseudo annotations for image {image_id}")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def hungarian_loss(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gts: GroundTruthSet,
    class_subset: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Set-prediction loss for one image: weighted focal terms over every
    slot (matched slots positive, the rest no-object) plus l1 and GIoU terms
    over the matched boxes."""
    m = logits.shape[0]
    slot_targets = torch.full((m,), NO_OBJECT, dtype=torch.long)
    l1 = logits.new_zeros(())
    giou_term = logits.new_zeros(())
    if len(gts):
        assignment = hungarian_solve(cost_matrix(gts, logits, boxes))
        slots = torch.tensor(assignment.target_to_slot, dtype=torch.long)
        slot_targets[slots] = gts.labels
        matched = boxes[slots]
        tgt = gts.boxes.to(boxes.dtype)
        l1 = (matched - tgt).abs().sum()
        giou_term = (1 - box_giou(matched, tgt)).sum()
    cls = focal_loss_matrix(logits, slot_targets, class_subset=class_subset)
    total = W_CLS * cls + W_L1 * l1 + W_GIOU * giou_term
    parts = {
        "cls": float(W_CLS * cls.detach()),
        "l1": float(W_L1 * l1.detach()),
        "giou": float(W_GIOU * giou_term.detach()),
    }
    return total, parts


def batch_hungarian_loss(
    logits: torch.Tensor,
    boxes: torch.Tensor,
    gts_list: list[GroundTruthSet],
    class_subset: torch.Tensor | None = None,
    prefix: str = "",
) -> tuple[torch.Tensor, dict[str, float]]:
    """The Hungarian loss over a whole batch, averaged over images.

    Matching runs per image; the focal and box terms are then evaluated as
    single batched expressions (equal to summing `hungarian_loss` per image).
    """
    b, m, _ = logits.shape
    slot_targets = torch.full((b, m), NO_OBJECT, dtype=torch.long)
    matched_pred, matched_tgt = [], []
    for i, g in enumerate(gts_list):
        if len(g):
            assignment = hungarian_solve(cost_matrix(g, logits[i], boxes[i]))
            slots = torch.tensor(assignment.target_to_slot, dtype=torch.long)
            slot_targets[i, slots] = g.labels
            matched_pred.append(boxes[i, slots])
            matched_tgt.append(g.boxes.to(boxes.dtype))
    cls = focal_loss_matrix(
        logits.reshape(b * m, -1), slot_targets.reshape(-1), class_subset=class_subset
    )
    if matched_pred:
        pred = torch.cat(matched_pred)
        tgt = torch.cat(matched_tgt)
        l1 = (pred - tgt).abs().sum()
        giou_term = (1 - box_giou(pred, tgt)).sum()
    else:
        l1 = logits.new_zeros(())
        giou_term = logits.new_zeros(())
    total = (W_CLS * cls + W_L1 * l1 + W_GIOU * giou_term) / b
    parts = {
        f"{prefix}cls": float(W_CLS * cls.detach()) / b,
        f"{prefix}l1": float(W_L1 * l1.detach()) / b,
        f"{prefix}giou": float(W_GIOU * giou_term.detach()) / b,
    }
    return total, parts


def _image_cache(dataset: Dataset) -> torch.Tensor:
    """(N, 3, H, W) uint8 tensor of all images, aligned with sample order."""
    if not len(dataset.samples):
        return torch.zeros((0, 3, 1, 1), dtype=torch.uint8)
    stack = np.stack([s.image for s in dataset.samples])
    return torch.from_numpy(stack).permute(0, 3, 1, 2).contiguous()


def _flip_gts(gts: GroundTruthSet) -> GroundTruthSet:
    boxes = gts.boxes.clone()
    boxes[:, 0] = 1.0 - boxes[:, 0]
    return GroundTruthSet(gts.labels, boxes)


def _accumulate(parts_sum: dict[str, float], parts: dict[str, float]) -> None:
    for k, v in parts.items():
        parts_sum[k] = parts_sum.get(k, 0.0) + v


def _train(
    model: Detector,
    dataset: Dataset,
    cfg: PhaseConfig,
    batch_loss_fn,
) -> None:
    """Shared epoch/batch loop. `batch_loss_fn(out, images, gts, samples,
    flips)` returns (scalar loss, parts dict) averaged over the batch."""
    seed_everything(cfg.seed)
    trainable = cfg.trainable_groups()
    model.set_trainable(trainable)
    frozen_groups = ALL_GROUPS - trainable
    frozen_before = hash_params(model, frozen_groups)

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = (
        torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay) if params else None
    )
    rng = np.random.default_rng(cfg.seed)
    cache = _image_cache(dataset)
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        if optimizer and cfg.lr_decay_epoch is not None and epoch == cfg.lr_decay_epoch:
            for group in optimizer.param_groups:
                group["lr"] *= cfg.lr_decay_factor
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            samples = [dataset[int(i)] for i in idx]
            flips = [cfg.hflip and bool(rng.random() < 0.5) for _ in samples]
            images = cache[torch.from_numpy(idx)].to(torch.float32).div_(255.0)
            flip_rows = [i for i, f in enumerate(flips) if f]
            if flip_rows:
                images[flip_rows] = torch.flip(images[flip_rows], dims=[-1])
            gts = [_flip_gts(s.gts) if f else s.gts for s, f in zip(samples, flips)]
            out = model(images)
            loss, parts = batch_loss_fn(out, images, gts, samples, flips)
            if optimizer:
                optimizer.zero_grad()
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                optimizer.step()
            if step % LOG_EVERY == 0:
                pieces = " ".join(f"{k}={v:.4f}" for k, v in sorted(parts.items()))
                log.info("phase=%s epoch=%d step=%d %s total=%.4f", cfg.phase, epoch, step, pieces, float(loss.detach()))
            step += 1

    if hash_params(model, frozen_groups) != frozen_before:
        raise PhaseError(cfg.phase, "frozen parameter groups changed during training")


def pretrain_base(model: Detector, dataset: Dataset, cfg: PhaseConfig) -> dict:
    """Train the whole model on base-class data with the Hungarian loss."""
    if cfg.phase != PRETRAIN:
        raise PhaseError(PRETRAIN, f"wrong phase config {cfg.phase!r}")
    illegal = dataset.label_set() - set(dataset.split.base_classes)
    if illegal:
        raise PhaseError(PRETRAIN, f"dataset contains non-base labels {sorted(illegal)}")

    def batch_loss(out: ModelOutput, images, gts, samples, flips):
        return batch_hungarian_loss(out.logits, out.boxes, gts)

    _train(model, dataset, cfg, batch_loss)
    return checkpoint_payload(model)


def finetune_base(
    model: Detector,
    dataset: Dataset,
    pseudo_source: dict[int, GroundTruthSet],
    cfg: PhaseConfig,
) -> dict:
    """Self-supervised fine-tuning of the class-specific components: real
    Hungarian loss plus the pseudo-proposal Hungarian loss, where proposal
    classification is binary on the reserved proposal logit."""
    if cfg.phase != BASE_FT:
        raise PhaseError(BASE_FT, f"wrong phase config {cfg.phase!r}")
    for s in dataset.samples:
        if s.image_id not in pseudo_source:
            raise PseudoAnnotationsMissingError(s.image_id)
    pseudo_subset = torch.tensor([model.config.pseudo_class], dtype=torch.long)

    def batch_loss(out: ModelOutput, images, gts, samples, flips):
        real, parts = batch_hungarian_loss(out.logits, out.boxes, gts)
        pseudo_gts = [
            _flip_gts(pseudo_source[s.image_id]) if f else pseudo_source[s.image_id]
            for s, f in zip(samples, flips)
        ]
        pseudo, pseudo_parts = batch_hungarian_loss(
            out.logits, out.boxes, pseudo_gts, class_subset=pseudo_subset, prefix="selfsup_"
        )
        total = real + cfg.lambda_selfsup * pseudo
        _accumulate(parts, {k: cfg.lambda_selfsup * v for k, v in pseudo_parts.items()})
        return total, parts

    _train(model, dataset, cfg, batch_loss)
    return checkpoint_payload(model)


def finetune_novel(
    student: Detector,
    teacher: Detector,
    dataset: Dataset,
    cfg: PhaseConfig,
) -> dict:
    """Incremental few-shot fine-tuning: Hungarian loss on the novel K-shot
    data plus masked feature distillation and classification KL distillation
    against the frozen teacher."""
    if cfg.phase != NOVEL_FT:
        raise PhaseError(NOVEL_FT, f"wrong phase config {cfg.phase!r}")
    base_ids = set(dataset.split.base_classes)
    illegal = dataset.label_set() & base_ids
    if illegal:
        raise PhaseError(
            NOVEL_FT, f"batch would contain base-class annotations {sorted(illegal)}"
        )
    teacher_before = hash_params(teacher)
    base_class_ids = student.config.base_class_ids

    def batch_loss(out: ModelOutput, images, gts, samples, flips):
        with torch.no_grad():
            teacher_out = teacher(images)
        total, parts = batch_hungarian_loss(out.logits, out.boxes, gts)
        b = len(gts)
        kd_total = out.logits.new_zeros(())
        feat_sum = cls_sum = 0.0
        for i, g in enumerate(gts):
            feat_kd, cls_kd = kd_losses(out.image(i), teacher_out.image(i), g, base_class_ids)
            kd_total = kd_total + cfg.lambda_feat * feat_kd + cfg.lambda_cls * cls_kd
            feat_sum += float(cfg.lambda_feat * feat_kd.detach())
            cls_sum += float(cfg.lambda_cls * cls_kd.detach())
        total = total + kd_total / b
        _accumulate(parts, {"feat_kd": feat_sum / b, "cls_kd": cls_sum / b})
        return total, parts

    _train(student, dataset, cfg, batch_loss)
    if hash_params(teacher) != teacher_before:
        raise PhaseError(NOVEL_FT, "teacher parameters changed during novel fine-tuning")
    return checkpoint_payload(student)


def build_pseudo_source(
    dataset: Dataset, config: ExperimentConfig
) -> dict[int, GroundTruthSet]:
    """Selective-search pseudo ground truths for every image, keyed by id."""
    pcfg = config.proposals
    pseudo_class = config.model.pseudo_class
    source: dict[int, GroundTruthSet] = {}
    for s in dataset.samples:
        props = generate_proposals(
            s.image, k=pcfg.k, min_size=pcfg.min_size, sigma=pcfg.sigma,
            seed=pcfg.seed + s.image_id,
        )
        h, w = s.image.shape[:2]
        source[s.image_id] = prune_to_pseudo_gt(
            props, s.gts, pcfg.top_o, (w, h), pcfg.overlap_threshold, pseudo_class
        )
    return source


def save_pseudo_annotations(
    source: dict[int, GroundTruthSet],
    sizes: dict[int, tuple[int, int]],
    pseudo_class: int,
    path: Path,
) -> None:
    """COCO-style pseudo-annotation file; `bbox_norm` keeps exact values."""
    images, annotations = [], []
    ann_id = 1
    for image_id in sorted(source):
        w, h = sizes[image_id]
        images.append({"id": image_id, "width": w, "height": h})
        for box in source[image_id].boxes.tolist():
            cx, cy, bw, bh = box
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": pseudo_class,
                    "bbox": [(cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h],
                    "bbox_norm": [cx, cy, bw, bh],
                }
            )
            ann_id += 1
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": pseudo_class, "name": "proposal"}],
    }
    path.write_text(json.dumps(payload, sort_keys=True))


def load_pseudo_annotations(path: Path) -> dict[int, GroundTruthSet]:
    payload = json.loads(Path(path).read_text())
    by_image: dict[int, list[list[float]]] = {im["id"]: [] for im in payload["images"]}
    labels: dict[int, list[int]] = {im["id"]: [] for im in payload["images"]}
    for ann in payload["annotations"]:
        by_image[ann["image_id"]].append(ann["bbox_norm"])
        labels[ann["image_id"]].append(ann["category_id"])
    return {
        image_id: GroundTruthSet(
            torch.tensor(labels[image_id], dtype=torch.long),
            torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
        )
        for image_id, boxes in by_image.items()
    }


def build_datasets(config: ExperimentConfig) -> dict[str, Dataset]:
    """Deterministic desk datasets: base train, novel K-shot, all-class test.

    Base images carry unlabeled spare-palette shapes and novel images carry
    unlabeled base-class shapes, so selective-search proposals and the
    teacher's pseudo base detections have real objects to latch on.
    """
    from .data import SHAPE_NAMES

    split = config.split
    d = config.data
    # base-image latent objects come from the spare palette, not the novel
    # classes: thousands of background-suppression steps on novel shapes
    # would otherwise have to be undone from K examples
    spare = tuple(i for i in range(len(SHAPE_NAMES)) if i not in split.all_classes)
    base_train = generate_shapes(
        d.seed, d.n_base_train, split, split.base_classes,
        image_size=d.image_size, n_objects=(d.min_objects, d.max_objects), noise=d.noise,
        distractors=spare, distractor_rate=d.base_distractor_rate,
    )
    # the K-shot pool stays sparse: beyond-quota instances are masked out of
    # supervision, and dense novel images would turn most of their objects
    # into contradictory background
    novel_pool = generate_shapes(
        d.seed + 1, d.n_novel_pool, split, split.novel_classes,
        image_size=d.image_size, n_objects=(1, 2), noise=d.noise,
        id_offset=1_000_000,
        distractors=split.base_classes, distractor_rate=d.novel_distractor_rate,
    )
    test = generate_shapes(
        d.seed + 2, d.n_test, split, split.all_classes,
        image_size=d.image_size, n_objects=(d.min_objects, d.max_objects), noise=d.noise,
        id_offset=2_000_000,
    )
    kshot = kshot_sample(novel_pool, split.novel_classes, config.shots, seed=config.seed)
    return {"base_train": base_train, "kshot": kshot, "test": test}


def phase_config(config: ExperimentConfig, phase: str) -> PhaseConfig:
    cfg = {PRETRAIN: config.pretrain, BASE_FT: config.base_ft, NOVEL_FT: config.novel_ft}[phase]
    offset = {PRETRAIN: 0, BASE_FT: 1, NOVEL_FT: 2}[phase]
    out = PhaseConfig(**{**cfg.__dict__})
    out.seed = config.seed * 100 + cfg.seed + offset
    if phase == NOVEL_FT and config.no_kd:
        out.lambda_feat = 0.0
        out.lambda_cls = 0.0
    return out


def run_protocol(config: ExperimentConfig) -> dict:
    """Execute PRETRAIN -> BASE_FT -> NOVEL_FT (BASE_FT skipped under
    `no_selfsup`), evaluating on the held-out test set after each phase.
    Writes stable checkpoint names and report.json under the output dir."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = build_datasets(config)
    report: dict = {
        "seed": config.seed,
        "shots": config.shots,
        "no_kd": config.no_kd,
        "no_selfsup": config.no_selfsup,
        "phases": [],
    }

    def record(phase: str, model: Detector) -> None:
        result = evaluate(model, datasets["test"])
        report["phases"].append({"phase": phase, "eval": result.to_dict()})
        log.info(
            "phase=%s eval base AP50=%.3f novel AP50=%.3f all AP50=%.3f",
            phase, result.base["ap50"], result.novel["ap50"], result.all["ap50"],
        )

    try:
        seed_everything(config.seed)
        model = Detector(config.model)
        pretrain_base(model, datasets["base_train"], phase_config(config, PRETRAIN))
        save_checkpoint(model, out_dir / "pretrain.ckpt")
        record(PRETRAIN, model)
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(PRETRAIN, str(exc)) from exc

    if not config.no_selfsup:
        try:
            proposals_path = out_dir / "proposals.json"
            if proposals_path.exists():
                pseudo_source = load_pseudo_annotations(proposals_path)
            else:
                pseudo_source = build_pseudo_source(datasets["base_train"], config)
                sizes = {
                    s.image_id: (s.image.shape[1], s.image.shape[0])
                    for s in datasets["base_train"].samples
                }
                save_pseudo_annotations(
                    pseudo_source, sizes, config.model.pseudo_class, proposals_path
                )
                pseudo_source = load_pseudo_annotations(proposals_path)
            finetune_base(
                model, datasets["base_train"], pseudo_source, phase_config(config, BASE_FT)
            )
            save_checkpoint(model, out_dir / "base_ft.ckpt")
            record(BASE_FT, model)
        except PhaseError:
            raise
        except Exception as exc:
            raise PhaseError(BASE_FT, str(exc)) from exc

    try:
        teacher = model.clone_frozen()
        novel_cfg = phase_config(config, NOVEL_FT)
        finetune_novel(model, teacher, datasets["kshot"], novel_cfg)
        save_checkpoint(model, out_dir / "novel_ft.ckpt")
        record(NOVEL_FT, model)
        base_ids = set(datasets["base_train"].image_ids())
        touched = datasets["kshot"].access_log
        if touched & base_ids:
            raise PhaseError(NOVEL_FT, "novel fine-tuning read base-split images")
    except PhaseError:
        raise
    except Exception as exc:
        raise PhaseError(NOVEL_FT, str(exc)) from exc

    (out_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2))
    return report
