"""Unsupervised object proposals: graph-based over-segmentation followed by
hierarchical region grouping, plus the pruning rule that turns ranked
proposals into pseudo ground truths carrying the reserved proposal class.

Similarity between adjacent regions sums four components (color, texture,
size, fill), each in [0, 1]. Proposal ranking multiplies the merge level by
a seeded uniform draw, so proposal lists are bit-identical for identical
(image, seed, parameters).
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import Box, PixelBox, pairwise_iou
from .matcher import GroundTruthSet

COLOR_BINS = 25
TEXTURE_ORIENTATIONS = 8
DEFAULT_OVERLAP_THRESHOLD = 0.2
DEFAULT_TOP_O = 10


@dataclass
class Region:
    """A connected pixel region with the statistics the grouping step needs."""

    pixels: np.ndarray  # flat pixel indices into the image grid
    size: int
    bbox: PixelBox
    color_hist: np.ndarray  # (3 * COLOR_BINS,), sums to 1
    texture_hist: np.ndarray  # (3 * TEXTURE_ORIENTATIONS,), sums to 1
    level: int
    image_shape: tuple[int, int]  # (h, w)


@dataclass(frozen=True)
class RankedProposal:
    box: PixelBox
    rank: float


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of an (H, W, 3) float image."""
    if sigma <= 0:
        return img
    radius = max(1, int(round(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for o, w in enumerate(kernel):
        out += w * padded[o : o + img.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for o, w in enumerate(kernel):
        out += w * padded[:, o : o + img.shape[1]]
    return out


def _grid_edges(h: int, w: int, img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-connected grid edges with euclidean color distances as weights."""
    idx = np.arange(h * w).reshape(h, w)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),  # right
        (idx[:-1, :], idx[1:, :]),  # down
        (idx[:-1, :-1], idx[1:, 1:]),  # down-right
        (idx[:-1, 1:], idx[1:, :-1]),  # down-left
    ]
    src = np.concatenate([a.ravel() for a, _ in pairs])
    dst = np.concatenate([b.ravel() for _, b in pairs])
    flat = img.reshape(-1, 3)
    weight = np.sqrt(((flat[src] - flat[dst]) ** 2).sum(-1))
    return src, dst, weight


class _UnionFind:
    __slots__ = ("parent", "size")

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def _segment_labels(img: np.ndarray, k: float, min_size: int) -> np.ndarray:
    """Graph-merge segmentation labels (compact, 0-based) for an (H, W, 3) image."""
    h, w = img.shape[:2]
    src, dst, weight = _grid_edges(h, w, img)
    order = np.argsort(weight, kind="stable")
    src_l = src[order].tolist()
    dst_l = dst[order].tolist()
    w_l = weight[order].tolist()

    uf = _UnionFind(h * w)
    threshold = [k] * (h * w)
    find, union, size = uf.find, uf.union, uf.size
    for a, b, wt in zip(src_l, dst_l, w_l):
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if wt <= threshold[ra] and wt <= threshold[rb]:
            r = union(ra, rb)
            threshold[r] = wt + k / size[r]
    for a, b in zip(src_l, dst_l):
        ra, rb = find(a), find(b)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            union(ra, rb)

    roots = np.fromiter((find(i) for i in range(h * w)), dtype=np.int64, count=h * w)
    _, labels = np.unique(roots, return_inverse=True)
    return labels.reshape(h, w)


def _color_histograms(img: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    bins = np.clip((img * (COLOR_BINS / 256.0)).astype(np.int64), 0, COLOR_BINS - 1)
    hist = np.zeros((n, 3 * COLOR_BINS), dtype=np.float64)
    flat_labels = labels.ravel()
    for ch in range(3):
        key = flat_labels * (3 * COLOR_BINS) + ch * COLOR_BINS + bins[..., ch].ravel()
        hist += np.bincount(key, minlength=n * 3 * COLOR_BINS).reshape(n, -1)
    return hist / hist.sum(axis=1, keepdims=True)


def _texture_histograms(img: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    hist = np.zeros((n, 3 * TEXTURE_ORIENTATIONS), dtype=np.float64)
    flat_labels = labels.ravel()
    for ch in range(3):
        gy, gx = np.gradient(img[..., ch])
        angle = np.arctan2(gy, gx)  # [-pi, pi]
        bins = np.clip(
            ((angle + np.pi) * (TEXTURE_ORIENTATIONS / (2 * np.pi))).astype(np.int64),
            0,
            TEXTURE_ORIENTATIONS - 1,
        )
        key = flat_labels * (3 * TEXTURE_ORIENTATIONS) + ch * TEXTURE_ORIENTATIONS + bins.ravel()
        hist += np.bincount(key, minlength=n * 3 * TEXTURE_ORIENTATIONS).reshape(n, -1)
    return hist / hist.sum(axis=1, keepdims=True)


def oversegment(
    image: np.ndarray, k: float, min_size: int, sigma: float = 0.0
) -> list[Region]:
    """Partition an (H, W, 3) image into connected regions.

    `k` scales the merge threshold (larger -> fewer regions); components
    smaller than `min_size` are absorbed into a neighbor. Deterministic.
    """
    if image.ndim != 3 or image.shape[-1] != 3 or image.size == 0:
        raise ValueError("expected a nonempty (H, W, 3) image")
    if k <= 0:
        raise ValueError("k must be positive")
    img = _gaussian_blur(image.astype(np.float64), sigma)
    labels = _segment_labels(img, k, min_size)
    h, w = labels.shape
    n = int(labels.max()) + 1

    color_h = _color_histograms(img, labels, n)
    texture_h = _texture_histograms(img, labels, n)
    sizes = np.bincount(labels.ravel(), minlength=n)
    order = np.argsort(labels.ravel(), kind="stable")
    bounds = np.cumsum(sizes)[:-1]
    pixel_groups = np.split(order, bounds)

    regions = []
    for lbl in range(n):
        pix = pixel_groups[lbl]
        rows, cols = pix // w, pix % w
        bbox = PixelBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
        regions.append(
            Region(
                pixels=pix,
                size=int(sizes[lbl]),
                bbox=bbox,
                color_hist=color_h[lbl],
                texture_hist=texture_h[lbl],
                level=1,
                image_shape=(h, w),
            )
        )
    return regions


def _adjacency(regions: list[Region]) -> dict[int, set[int]]:
    h, w = regions[0].image_shape
    label_map = np.empty(h * w, dtype=np.int64)
    for i, r in enumerate(regions):
        label_map[r.pixels] = i
    label_map = label_map.reshape(h, w)
    neighbors: dict[int, set[int]] = {i: set() for i in range(len(regions))}
    for a, b in ((label_map[:, :-1], label_map[:, 1:]), (label_map[:-1, :], label_map[1:, :])):
        touching = a != b
        for x, y in zip(a[touching].ravel().tolist(), b[touching].ravel().tolist()):
            neighbors[x].add(y)
            neighbors[y].add(x)
    return neighbors


def _similarity(a: Region, b: Region, image_area: int) -> float:
    s_color = float(np.minimum(a.color_hist, b.color_hist).sum())
    s_texture = float(np.minimum(a.texture_hist, b.texture_hist).sum())
    s_size = 1.0 - (a.size + b.size) / image_area
    merged = _merge_bbox(a.bbox, b.bbox)
    bbox_area = (merged.x2 - merged.x1) * (merged.y2 - merged.y1)
    s_fill = 1.0 - (bbox_area - a.size - b.size) / image_area
    return s_color + s_texture + s_size + s_fill


def _merge_bbox(a: PixelBox, b: PixelBox) -> PixelBox:
    return PixelBox(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def _merge_regions(a: Region, b: Region) -> Region:
    size = a.size + b.size
    return Region(
        pixels=np.concatenate([a.pixels, b.pixels]),
        size=size,
        bbox=_merge_bbox(a.bbox, b.bbox),
        color_hist=(a.color_hist * a.size + b.color_hist * b.size) / size,
        texture_hist=(a.texture_hist * a.size + b.texture_hist * b.size) / size,
        level=max(a.level, b.level) + 1,
        image_shape=a.image_shape,
    )


def hierarchical_group(regions: list[Region], seed: int = 0) -> list[RankedProposal]:
    """Merge the most similar adjacent pair until one region remains.

    Every region ever seen (initial and merged) emits its bounding box; the
    rank key is the region's merge level times a seeded uniform draw, and
    the output is sorted by ascending rank.
    """
    if not regions:
        raise ValueError("at least one region required")
    h, w = regions[0].image_shape
    image_area = h * w
    pool: dict[int, Region] = dict(enumerate(regions))
    neighbors = _adjacency(regions)
    alive = set(pool)
    heap: list[tuple[float, int, int]] = []
    for a in neighbors:
        for b in neighbors[a]:
            if a < b:
                heap.append((-_similarity(pool[a], pool[b], image_area), a, b))
    heapq.heapify(heap)

    next_id = len(regions)
    while len(alive) > 1:
        neg_sim, a, b = heapq.heappop(heap)
        if a not in alive or b not in alive:
            continue
        merged = _merge_regions(pool[a], pool[b])
        new_id = next_id
        next_id += 1
        pool[new_id] = merged
        alive.discard(a)
        alive.discard(b)
        new_neighbors = (neighbors[a] | neighbors[b]) & alive
        neighbors[new_id] = new_neighbors
        for x in new_neighbors:
            neighbors[x].add(new_id)
        alive.add(new_id)
        for x in sorted(new_neighbors):
            heapq.heappush(heap, (-_similarity(merged, pool[x], image_area), x, new_id))

    rng = np.random.default_rng(seed)
    ranked = [
        RankedProposal(box=pool[i].bbox, rank=pool[i].level * float(rng.random()))
        for i in sorted(pool)
    ]
    ranked.sort(key=lambda p: p.rank)
    return ranked


def pseudo_label_index(n_classes_in_play: int) -> int:
    """Head slot reserved for object proposals: the index right after the
    n classes currently in play (the paper's c' = n + 1 in 1-based labels).
    """
    if n_classes_in_play < 1:
        raise ValueError("need at least one class in play")
    return n_classes_in_play


def prune_to_pseudo_gt(
    proposals: list[RankedProposal],
    gt: GroundTruthSet,
    top_o: int,
    image_size: tuple[int, int],
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
    pseudo_class: int | None = None,
) -> GroundTruthSet:
    """Walk the ranked list keeping proposals that do not overlap any real
    ground truth box (IoU <= threshold), stopping after `top_o` kept.

    `image_size` is (width, height); boxes are normalized to center form and
    labeled with `pseudo_class` (default: slot after the max GT label).
    """
    if top_o < 0:
        raise ValueError("top_o must be >= 0")
    img_w, img_h = image_size
    if pseudo_class is None:
        n = int(gt.labels.max()) + 1 if len(gt) else 1
        pseudo_class = pseudo_label_index(n)
    kept: list[Box] = []
    for prop in proposals:
        if len(kept) >= top_o:
            break
        box = prop.box.to_box(img_w, img_h)
        if len(gt):
            ious = pairwise_iou(box.to_tensor(torch.float32).unsqueeze(0), gt.boxes)
            if float(ious.max()) > overlap_threshold:
                continue
        kept.append(box)
    return GroundTruthSet.from_objects([(pseudo_class, b) for b in kept])


def generate_proposals(
    image: np.ndarray,
    k: float = 200.0,
    min_size: int = 20,
    sigma: float = 0.8,
    seed: int = 0,
) -> list[RankedProposal]:
    """Over-segmentation plus grouping in one call."""
    return hierarchical_group(oversegment(image, k, min_size, sigma), seed=seed)
