"""Procedural ground-truth world: colored shapes with exactly-known graphs.

Every predicate is decidable from bounding boxes alone, so stored
relations can be re-derived and checked by an oracle. The derivation
function below is the single source of truth for which triples a scene
contains:

* ``inside``: subject box strictly contained in the object box.
* ``overlapping``: box IoU >= 0.05 and neither box inside the other.
* ``left of`` / ``right of`` / ``above`` / ``below``: boxes disjoint
  (IoU < 0.05, no containment), offset along the dominant axis exceeds
  a tenth of the image extent; one directed triple per pair, emitted
  from the lower-id node's viewpoint.
* ``near``: boxes disjoint and center distance <= 0.30 * max(W, H);
  emitted from the lower-id node's viewpoint.
* ``larger than``: subject box area >= 2x object box area.

Scenes are rendered as flat-colored shapes over a light, lightly noised
background; bounding boxes are the circumscribed square of each shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .graphs import ObjectNode, RelationTriple, SceneGraph, Vocab

SHAPES = ("circle", "square", "triangle", "star", "diamond", "cross")
# Palette chosen for mutual L1 separation >= 160 and distance from the
# light-gray background, so color-keyed segmentation stays unambiguous
# under render jitter and generator blur.
COLORS = {
    "red": (230, 60, 60),
    "green": (70, 190, 80),
    "blue": (60, 70, 235),
    "yellow": (235, 220, 60),
    "magenta": (220, 70, 220),
    "cyan": (70, 210, 220),
}
SIZES = ("small", "large")
PREDICATES = (
    "left of",
    "right of",
    "above",
    "below",
    "inside",
    "overlapping",
    "larger than",
    "near",
)


def default_vocab() -> Vocab:
    return Vocab(SHAPES, PREDICATES, tuple(COLORS) + SIZES)


@dataclass(frozen=True)
class WorldSpec:
    image_size: tuple[int, int] = (64, 64)
    min_objects: int = 2
    max_objects: int = 4
    radius_range: tuple[float, float] = (0.10, 0.20)  # fraction of min image side
    large_threshold: float = 0.15  # radius fraction at which "large" applies
    containment_prob: float = 0.25  # chance a scene gets an inside-pair
    background_noise: float = 3.0
    overlap_iou: float = 0.05
    offset_margin: float = 0.10  # fraction of image extent for directional predicates
    near_distance: float = 0.30  # fraction of max image side

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("bad object count range")


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def _inside(a, b) -> bool:
    return a[0] > b[0] and a[1] > b[1] and a[2] < b[2] and a[3] < b[3]


def derive_relations(boxes: dict[int, tuple], image_size, vocab: Vocab,
                     spec: Optional[WorldSpec] = None) -> tuple[RelationTriple, ...]:
    """Canonical predicate derivation from bounding boxes.

    ``boxes`` maps node id to (x0, y0, x1, y1). Output order is sorted by
    (min id, max id) pair then predicate index, so equal inputs always
    produce the identical triple sequence.
    """
    spec = spec or WorldSpec(image_size=tuple(image_size))
    w, h = image_size
    pid = {name: vocab.predicate_index(name) for name in PREDICATES}
    triples: list[RelationTriple] = []
    ids = sorted(boxes)
    for ai in range(len(ids)):
        for bi in range(ai + 1, len(ids)):
            i, j = ids[ai], ids[bi]
            a, b = boxes[i], boxes[j]
            pair: list[RelationTriple] = []
            if _inside(a, b):
                pair.append(RelationTriple(i, pid["inside"], j))
            elif _inside(b, a):
                pair.append(RelationTriple(j, pid["inside"], i))
            elif box_iou(a, b) >= spec.overlap_iou:
                pair.append(RelationTriple(i, pid["overlapping"], j))
            else:
                acx, acy = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
                bcx, bcy = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
                dx, dy = bcx - acx, bcy - acy
                if abs(dx) >= abs(dy):
                    if dx > spec.offset_margin * w:
                        pair.append(RelationTriple(i, pid["left of"], j))
                    elif dx < -spec.offset_margin * w:
                        pair.append(RelationTriple(i, pid["right of"], j))
                else:
                    if dy > spec.offset_margin * h:
                        pair.append(RelationTriple(i, pid["above"], j))
                    elif dy < -spec.offset_margin * h:
                        pair.append(RelationTriple(i, pid["below"], j))
                if math.hypot(dx, dy) <= spec.near_distance * max(w, h):
                    pair.append(RelationTriple(i, pid["near"], j))
            area_a = (a[2] - a[0]) * (a[3] - a[1])
            area_b = (b[2] - b[0]) * (b[3] - b[1])
            if area_a >= 2.0 * area_b:
                pair.append(RelationTriple(i, pid["larger than"], j))
            elif area_b >= 2.0 * area_a:
                pair.append(RelationTriple(j, pid["larger than"], i))
            pair.sort(key=lambda t: t.predicate_id)
            triples.extend(pair)
    return tuple(triples)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Binary mask of a shape on a size x size canvas (circumscribed box)."""
    r = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size]
    xc, yc = x - r, y - r
    if shape == "circle":
        return xc ** 2 + yc ** 2 <= r ** 2
    if shape == "square":
        return (np.abs(xc) <= 0.82 * r) & (np.abs(yc) <= 0.82 * r)
    if shape == "diamond":
        return np.abs(xc) + np.abs(yc) <= 1.05 * r
    if shape == "triangle":
        # Upward triangle: apex at top-center, base near the bottom edge;
        # half-plane form |xc| / r <= (yc + r) / (1.85 * r).
        base = yc <= 0.85 * r
        side = np.abs(xc) / r <= (yc + r) / (1.85 * r)
        return base & side
    if shape == "star":
        theta = np.arctan2(yc, xc)
        rr = np.hypot(xc, yc)
        spikes = (np.cos(5 * (theta - math.pi / 2)) + 1) / 2
        return rr <= r * (0.35 + 0.65 * spikes)
    if shape == "cross":
        bar = 0.34 * r
        return ((np.abs(xc) <= bar) | (np.abs(yc) <= bar)) & (np.abs(xc) <= r) & (
            np.abs(yc) <= r
        )
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(g: SceneGraph, vocab: Vocab, spec: WorldSpec,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Rasterize a graph to a uint8 H x W x 3 image.

    Objects are drawn largest-first so contained shapes stay visible.
    ``rng`` drives background tint and pixel noise only; geometry comes
    from the graph.
    """
    w, h = spec.image_size
    rng = rng if rng is not None else np.random.default_rng(0)
    base = rng.integers(198, 242, size=3)
    img = np.ones((h, w, 3), dtype=np.float64) * base
    if spec.background_noise > 0:
        img += rng.normal(0.0, spec.background_noise, size=img.shape)
    order = sorted(
        g.objects,
        key=lambda n: -(n.bbox[2] - n.bbox[0]) * (n.bbox[3] - n.bbox[1]),
    )
    for node in order:
        x0, y0, x1, y1 = (int(round(v)) for v in node.bbox)
        size = max(2, min(x1 - x0, y1 - y0))
        shape = vocab.object_classes[node.class_id]
        mask = _shape_mask(shape, size)
        color = (128, 128, 128)
        for a in node.attributes:
            name = vocab.attribute_classes[a]
            if name in COLORS:
                color = COLORS[name]
                break
        jitter = rng.integers(-12, 13, size=3)
        tile = img[y0 : y0 + size, x0 : x0 + size]
        m = mask[: tile.shape[0], : tile.shape[1]]
        tile[m] = np.clip(np.array(color) + jitter, 0, 255)
    return np.clip(img, 0, 255).astype(np.uint8)


def sample_scene(vocab: Vocab, spec: WorldSpec, rng: np.random.Generator) -> SceneGraph:
    """Random scene: boxes, classes, color/size attributes, derived relations."""
    w, h = spec.image_size
    side = min(w, h)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    boxes: dict[int, tuple] = {}
    nodes: list[ObjectNode] = []
    # Distinct colors per scene keep color-keyed verification unambiguous
    # even for overlapping or nested objects.
    color_order = rng.permutation(list(COLORS))

    def add_node(cx, cy, r):
        node_id = len(nodes)
        x0, y0 = max(0.0, cx - r), max(0.0, cy - r)
        x1, y1 = min(float(w), cx + r), min(float(h), cy + r)
        shape_id = int(rng.integers(len(SHAPES)))
        color_id = vocab.attribute_index(str(color_order[node_id % len(color_order)]))
        size_name = "large" if r / side >= spec.large_threshold else "small"
        attrs = (color_id, vocab.attribute_index(size_name))
        boxes[node_id] = (x0, y0, x1, y1)
        nodes.append(ObjectNode(node_id, shape_id, attrs, (x0, y0, x1, y1)))

    if n >= 2 and rng.random() < spec.containment_prob:
        big_r = side * float(rng.uniform(0.26, 0.34))
        cx = float(rng.uniform(big_r, w - big_r))
        cy = float(rng.uniform(big_r, h - big_r))
        add_node(cx, cy, big_r)
        small_r = big_r * float(rng.uniform(0.30, 0.42))
        add_node(
            cx + float(rng.uniform(-0.3, 0.3)) * big_r,
            cy + float(rng.uniform(-0.3, 0.3)) * big_r,
            small_r,
        )
    while len(nodes) < n:
        r = side * float(rng.uniform(*spec.radius_range))
        cx = float(rng.uniform(r, w - r))
        cy = float(rng.uniform(r, h - r))
        add_node(cx, cy, r)
    relations = derive_relations(boxes, spec.image_size, vocab, spec)
    return SceneGraph(objects=tuple(nodes), relations=relations,
                      image_size=spec.image_size)


def generate_world(n_scenes: int, spec: WorldSpec, seed: int, out_dir,
                   vocab: Optional[Vocab] = None):
    """Render ``n_scenes`` scenes with ground-truth graphs into ``out_dir``.

    Writes PNGs under ``out_dir/images`` and a manifest at
    ``out_dir/manifest.jsonl``. Records whose recipe caption would exceed
    the token budget keep ``caption=None``; the filter stage excludes
    them. Byte-identical output per (n, spec, seed).
    """
    from .captions import CaptionTooLong, build_caption
    from .manifest import DatasetManifest, ManifestRecord, save_png
    from pathlib import Path

    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    vocab = vocab or default_vocab()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_scenes):
        scene_seed = int(rng.integers(0, 2**31 - 1))
        scene_rng = np.random.default_rng(scene_seed)
        graph = sample_scene(vocab, spec, scene_rng)
        img = render_scene(graph, vocab, spec, scene_rng)
        rel_path = f"images/{i:06d}.png"
        save_png(img, out_dir / rel_path)
        try:
            mapping = build_caption(graph, vocab)
        except CaptionTooLong:
            mapping = None
        records.append(
            ManifestRecord(
                image_path=rel_path,
                graph=graph,
                caption=mapping,
                provenance="real",
                seed=scene_seed,
            )
        )
    manifest = DatasetManifest(vocab=vocab, image_size=spec.image_size, records=records)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def to_model_array(img: np.ndarray) -> np.ndarray:
    """uint8 H x W x 3 -> float32 3 x H x W in [-1, 1]."""
    return (img.astype(np.float32) / 255.0 * 2.0 - 1.0).transpose(2, 0, 1)


def from_model_array(arr: np.ndarray) -> np.ndarray:
    out = (np.clip(arr, -1.0, 1.0) + 1.0) / 2.0 * 255.0
    return np.round(out).astype(np.uint8).transpose(1, 2, 0)
