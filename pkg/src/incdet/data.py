"""Synthetic shapes detection data, COCO-style annotation I/O, base/novel
split management and N-way K-shot sampling.

Images are (H, W, 3) uint8 arrays. Generation is fully deterministic from
the seed: the same seed reproduces byte-identical images and annotations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import Box, box_iou, from_corner
from .matcher import GroundTruthSet

GENERATOR_VERSION = 1

SHAPE_NAMES = ("circle", "square", "triangle", "diamond", "star", "cross", "ring", "bar")

_CLASS_COLORS = np.array(
    [
        (214, 45, 38),  # red
        (58, 170, 53),  # green
        (52, 80, 212),  # blue
        (226, 202, 42),  # yellow
        (196, 58, 196),  # magenta
        (52, 196, 190),  # cyan
        (230, 138, 36),  # orange
        (128, 62, 200),  # purple
    ],
    dtype=np.float64,
)


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class SplitSpec:
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel class sets overlap")
        if not self.base_classes:
            raise ValueError("need at least one base class")

    @property
    def all_classes(self) -> tuple[int, ...]:
        return self.base_classes + self.novel_classes


@dataclass
class DetectionSample:
    image: np.ndarray  # (H, W, 3) uint8
    gts: GroundTruthSet
    image_id: int


class Dataset:
    """A list of samples plus the split they were drawn from.

    Item access is recorded in `access_log` so training phases can be audited
    for reads they are not allowed to make. `meta` carries provenance
    (generator seed and version) into the on-disk manifest.
    """

    def __init__(self, samples: list[DetectionSample], split: SplitSpec, meta: dict | None = None):
        self.samples = samples
        self.split = split
        self.meta = meta or {}
        self.access_log: set[int] = set()

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> DetectionSample:
        sample = self.samples[i]
        self.access_log.add(sample.image_id)
        return sample

    def image_ids(self) -> list[int]:
        return [s.image_id for s in self.samples]

    def label_set(self) -> set[int]:
        out: set[int] = set()
        for s in self.samples:
            out.update(s.gts.labels.tolist())
        return out


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean mask of a canonical shape on a size x size grid."""
    r = size / 2
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx = cy = size / 2
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(dx) <= r * 0.92) & (np.abs(dy) <= r * 0.92)
    if shape == "triangle":
        # upward triangle: below the two slanted sides, above the base
        return (dy >= -r) & (dy <= r * 0.9) & (np.abs(dx) <= (dy + r) / 1.9)
    if shape == "star":
        angle = np.arctan2(dy, dx)
        radius = r * (0.45 + 0.55 * np.abs(np.cos(2.5 * angle)))
        return dx ** 2 + dy ** 2 <= radius ** 2
    if shape == "cross":
        return (np.abs(dx) <= r * 0.3) | (np.abs(dy) <= r * 0.3)
    if shape == "ring":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r * 0.28)
    raise ValueError(f"unknown shape {shape!r}")


def _tight_box(mask: np.ndarray, top: int, left: int, image_size: int) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y1, y2 = top + rows[0], top + rows[-1] + 1
    x1, x2 = left + cols[0], left + cols[-1] + 1
    return from_corner(x1 / image_size, y1 / image_size, x2 / image_size, y2 / image_size)


def _place_shape(
    rng: np.random.Generator,
    img: np.ndarray,
    cls: int,
    image_size: int,
    existing: list[torch.Tensor],
    size_range: tuple[float, float] = (0.22, 0.48),
) -> Box | None:
    """Paint one shape avoiding heavy overlap; returns its tight box."""
    for _attempt in range(20):
        side = int(rng.integers(int(size_range[0] * image_size), int(size_range[1] * image_size)))
        top = int(rng.integers(0, image_size - side))
        left = int(rng.integers(0, image_size - side))
        mask = _shape_mask(SHAPE_NAMES[cls], side)
        box = _tight_box(mask, top, left, image_size)
        bt = box.to_tensor(torch.float32)
        if all(float(box_iou(bt, other)) <= 0.25 for other in existing):
            color = _CLASS_COLORS[cls] + rng.uniform(-8, 8, size=3)
            img[top : top + side, left : left + side][mask] = np.clip(color, 0, 255)
            existing.append(bt)
            return box
    return None


def _render_sample(
    rng: np.random.Generator,
    image_id: int,
    classes_in_play: tuple[int, ...],
    image_size: int,
    n_objects: tuple[int, int],
    noise: float,
    distractors: tuple[int, ...],
    distractor_rate: float,
) -> DetectionSample:
    img = np.clip(
        128.0 + rng.normal(0.0, noise, size=(image_size, image_size, 3)), 0, 255
    )
    count = int(rng.integers(n_objects[0], n_objects[1] + 1))
    objects: list[tuple[int, Box]] = []
    boxes_t: list[torch.Tensor] = []
    for _ in range(count):
        cls = int(rng.choice(classes_in_play))
        box = _place_shape(rng, img, cls, image_size, boxes_t)
        if box is not None:
            objects.append((cls, box))
    # latent background objects: painted but never annotated; drawn large so
    # a detector trained on the labeled classes can be confident about them
    if distractors and rng.random() < distractor_rate:
        n_extra = 1 + int(rng.random() < 0.5)
        for _ in range(n_extra):
            _place_shape(
                rng, img, int(rng.choice(distractors)), image_size, boxes_t,
                size_range=(0.30, 0.55),
            )
    return DetectionSample(
        image=img.astype(np.uint8),
        gts=GroundTruthSet.from_objects(objects),
        image_id=image_id,
    )


def generate_shapes(
    seed: int,
    n_images: int,
    split: SplitSpec,
    classes_in_play: tuple[int, ...],
    image_size: int = 96,
    n_objects: tuple[int, int] = (1, 4),
    noise: float = 10.0,
    id_offset: int = 0,
    distractors: tuple[int, ...] = (),
    distractor_rate: float = 0.0,
) -> Dataset:
    """Deterministically generate a shapes detection dataset.

    Each image carries a noisy gray background and 1-4 colored shapes with
    tight ground truth boxes; classes are drawn uniformly from
    `classes_in_play`. `distractors` optionally paints additional unlabeled
    shapes (latent objects) into a `distractor_rate` fraction of images.
    """
    if max(classes_in_play) >= len(SHAPE_NAMES):
        raise DatasetError(
            f"class palette supports ids < {len(SHAPE_NAMES)}, got {max(classes_in_play)}"
        )
    if distractors and max(distractors) >= len(SHAPE_NAMES):
        raise DatasetError("distractor ids exceed the shape palette")
    unknown = set(classes_in_play) - set(split.all_classes)
    if unknown:
        raise DatasetError(f"classes {sorted(unknown)} not in the split")
    rng = np.random.default_rng(seed)
    samples = [
        _render_sample(
            rng, id_offset + i, tuple(classes_in_play), image_size, n_objects, noise,
            tuple(distractors), distractor_rate,
        )
        for i in range(n_images)
    ]
    return Dataset(samples, split, meta={"seed": seed, "generator_version": GENERATOR_VERSION})


def filter_labels(sample: DetectionSample, allowed: set[int]) -> DetectionSample:
    """Drop ground truth entries outside `allowed`; the image is untouched."""
    keep = torch.tensor([int(c) in allowed for c in sample.gts.labels], dtype=torch.bool)
    return DetectionSample(
        image=sample.image,
        gts=GroundTruthSet(sample.gts.labels[keep], sample.gts.boxes[keep]),
        image_id=sample.image_id,
    )


def kshot_sample(dataset: Dataset, novel_classes: tuple[int, ...], k: int, seed: int) -> Dataset:
    """Select images until every novel class has exactly `k` supervised
    instances; instances beyond the quota are dropped from supervision.
    """
    if k == 0:
        return Dataset([], dataset.split, meta={**dataset.meta, "kshot_seed": seed, "k": 0})
    counts = {c: 0 for c in novel_classes}
    order = np.random.default_rng(seed).permutation(len(dataset.samples))
    chosen: list[DetectionSample] = []
    for idx in order:
        if all(v >= k for v in counts.values()):
            break
        sample = dataset.samples[idx]
        keep_rows = []
        useful = False
        for row, label in enumerate(sample.gts.labels.tolist()):
            if label in counts and counts[label] < k:
                counts[label] += 1
                keep_rows.append(row)
                useful = True
        if useful:
            keep = torch.tensor(keep_rows, dtype=torch.long)
            chosen.append(
                DetectionSample(
                    image=sample.image,
                    gts=GroundTruthSet(sample.gts.labels[keep], sample.gts.boxes[keep]),
                    image_id=sample.image_id,
                )
            )
    missing = {c: k - v for c, v in counts.items() if v < k}
    if missing:
        raise DatasetError(f"not enough instances for {k}-shot sampling: missing {missing}")
    return Dataset(chosen, dataset.split, meta={**dataset.meta, "kshot_seed": seed, "k": k})


def save_dataset(dataset: Dataset, out_dir: Path | str) -> Path:
    """Persist as an image directory plus one COCO-style JSON; returns the
    annotation path. A manifest records the generator seed and version."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for s in dataset.samples:
        h, w = s.image.shape[:2]
        name = f"img_{s.image_id:06d}.png"
        Image.fromarray(s.image).save(out / "images" / name)
        images.append({"id": s.image_id, "width": w, "height": h, "file_name": f"images/{name}"})
        for label, box in zip(s.gts.labels.tolist(), s.gts.boxes.tolist()):
            cx, cy, bw, bh = box
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": s.image_id,
                    "category_id": int(label),
                    "bbox": [(cx - bw / 2) * w, (cy - bh / 2) * h, bw * w, bh * h],
                }
            )
            ann_id += 1
    categories = [
        {"id": c, "name": SHAPE_NAMES[c] if c < len(SHAPE_NAMES) else str(c)}
        for c in dataset.split.all_classes
    ]
    payload = {"images": images, "annotations": annotations, "categories": categories}
    ann_path = out / "annotations.json"
    ann_path.write_text(json.dumps(payload, sort_keys=True))
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "base_classes": list(dataset.split.base_classes),
        "novel_classes": list(dataset.split.novel_classes),
        "n_images": len(dataset.samples),
        **dataset.meta,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))
    return ann_path


def load_coco_json(path: Path | str, split: SplitSpec) -> Dataset:
    """Load a COCO-schema annotation file; boxes become normalized center
    form. Annotations whose category is outside the split are dropped."""
    from PIL import Image

    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"malformed annotation file {path}: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in payload:
            raise DatasetError(f"annotation file {path} missing {key!r}")
    known = {c["id"] for c in payload["categories"]}
    allowed = set(split.all_classes)
    by_image: dict[int, list[tuple[int, Box]]] = {im["id"]: [] for im in payload["images"]}
    meta = {im["id"]: im for im in payload["images"]}
    for ann in payload["annotations"]:
        cat = ann["category_id"]
        if cat not in known:
            raise DatasetError(f"annotation {ann['id']} has unknown category id {cat}")
        if cat not in allowed:
            continue
        x, y, bw, bh = ann["bbox"]
        if bw <= 0 or bh <= 0:
            raise DatasetError(f"annotation {ann['id']} has a degenerate box {ann['bbox']}")
        im = meta[ann["image_id"]]
        w, h = im["width"], im["height"]
        by_image[ann["image_id"]].append(
            (int(cat), from_corner(x / w, y / h, (x + bw) / w, (y + bh) / h))
        )
    samples = []
    for image_id, objects in by_image.items():
        im = meta[image_id]
        file_name = im.get("file_name")
        if file_name and (path.parent / file_name).exists():
            image = np.asarray(Image.open(path.parent / file_name).convert("RGB"))
        else:
            image = np.zeros((im["height"], im["width"], 3), dtype=np.uint8)
        samples.append(
            DetectionSample(image=image, gts=GroundTruthSet.from_objects(objects), image_id=image_id)
        )
    samples.sort(key=lambda s: s.image_id)
    return Dataset(samples, split)
