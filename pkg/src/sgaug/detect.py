"""Detections and hybrid annotation extraction for generated images.

Two detector backends share the :class:`Detection` record:

* :func:`oracle_detect` perturbs ground-truth boxes with configurable
  Gaussian jitter, class confusion, and score sampling. In pure-oracle
  mode (zero noise) it returns the ground truth with scores of 1.
* :class:`TemplateDetector` actually looks at pixels: each requested box
  is segmented against the estimated background and matched against the
  shape templates, so an image that failed to draw the requested object
  produces a low-scoring or differently-classed detection. This is the
  backend used to verify generated images.

:func:`extract_annotations` implements the verification step: a requested
triple survives only when both endpoint classes are found among the
detections with objectness and class scores at or above the threshold.
Matching is greedy by descending class score; one detection serves at
most one requested node, and kept nodes take the matched detection's box.
The output triples are always a subset of the requested ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .graphs import ObjectNode, RelationTriple, SceneGraph, Vocab
from .world import COLORS, _shape_mask

DEFAULT_THRESHOLD = 0.3


@dataclass(frozen=True)
class Detection:
    class_id: int
    bbox: tuple[float, float, float, float]
    objectness_score: float
    class_score: float

    def __post_init__(self):
        if not (0.0 <= self.objectness_score <= 1.0 and 0.0 <= self.class_score <= 1.0):
            raise ValueError("scores must lie in [0, 1]")


@dataclass(frozen=True)
class NoiseParams:
    sigma: float = 0.0  # box jitter in pixels
    p_confusion: float = 0.0  # chance the class label flips
    score_range: tuple[float, float] = (1.0, 1.0)

    @staticmethod
    def pure() -> "NoiseParams":
        return NoiseParams()


def oracle_detect(
    image: Optional[np.ndarray],
    graph: SceneGraph,
    noise: NoiseParams = NoiseParams(),
    n_classes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[Detection]:
    """Ground-truth boxes with optional jitter, confusion, score sampling.

    The image argument is unused by this backend (the oracle reads the
    record, not pixels) but kept for interface parity with pixel-based
    detectors.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if graph.image_size is not None:
        w, h = graph.image_size
    elif image is not None:
        h, w = image.shape[:2]
    else:
        w = h = None
    out = []
    lo, hi = noise.score_range
    for node in graph.objects:
        if node.bbox is None:
            continue
        box = np.array(node.bbox, dtype=np.float64)
        if noise.sigma > 0:
            box = box + rng.normal(0.0, noise.sigma, size=4)
            if w is not None:
                box[0::2] = np.clip(box[0::2], 0, w)
                box[1::2] = np.clip(box[1::2], 0, h)
            if box[2] - box[0] < 1:
                box[2] = box[0] + 1
            if box[3] - box[1] < 1:
                box[3] = box[1] + 1
        cls = node.class_id
        if noise.p_confusion > 0 and rng.random() < noise.p_confusion:
            total = n_classes if n_classes is not None else cls + 2
            choices = [c for c in range(total) if c != cls]
            cls = int(choices[int(rng.integers(len(choices)))])
        if lo >= hi:
            obj_score = cls_score = float(lo)
        else:
            obj_score = float(rng.uniform(lo, hi))
            cls_score = float(rng.uniform(lo, hi))
        out.append(Detection(cls, tuple(box), obj_score, cls_score))
    return out


def _tight(mask: np.ndarray):
    """Crop a mask to the bounding box of its nonzero entries."""
    rows = np.any(mask > 0, axis=1)
    cols = np.any(mask > 0, axis=0)
    if not rows.any():
        return None
    y0, y1 = int(np.argmax(rows)), int(len(rows) - np.argmax(rows[::-1]))
    x0, x1 = int(np.argmax(cols)), int(len(cols) - np.argmax(cols[::-1]))
    return mask[y0:y1, x0:x1]


class TemplateDetector:
    """Pixel-verified detection at requested boxes via shape-template matching.

    Foreground is whatever matches the requested color (or deviates from
    the border-estimated background when no color is given); class score
    is the agreement between the tightened foreground mask and the
    best-matching tightened class template, mapped to [0, 1]. Objectness
    is the foreground coverage of the requested box relative to the
    sparsest shape's fill.
    """

    def __init__(self, vocab: Vocab, template_size: int = 16,
                 color_tolerance: float = 80.0):
        self.vocab = vocab
        self.template_size = template_size
        self.color_tolerance = color_tolerance
        # Templates and crops are both tightened to their foreground box
        # before comparison, which makes matching insensitive to how the
        # requested box was rounded or how far the generator drifted.
        self._min_fill = float(
            min(_shape_mask(n, 64).mean() for n in vocab.object_classes)
        )
        self.templates = np.stack(
            [
                self._resize_mask(_tight(_shape_mask(name, 160).astype(np.float64)))
                for name in vocab.object_classes
            ]
        )
        self._colors = {
            vocab.attribute_index(name): np.array(rgb, dtype=np.float64)
            for name, rgb in COLORS.items()
            if name in vocab.attribute_classes
        }

    def _background(self, image: np.ndarray) -> np.ndarray:
        img = image.astype(np.float64)
        border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]], axis=0)
        return np.median(border, axis=0)

    def _node_foreground(self, image: np.ndarray, node: ObjectNode,
                         background: np.ndarray) -> np.ndarray:
        """Pixels belonging to the requested object.

        When the request states a color, segment by proximity to that
        color; this both isolates the object from overlapping neighbors
        and verifies the attribute binding. Otherwise fall back to
        anything far from the background estimate.
        """
        img = image.astype(np.float64)
        for a in node.attributes:
            color = self._colors.get(a)
            if color is not None:
                return np.abs(img - color).sum(axis=2) < self.color_tolerance
        return np.abs(img - background).sum(axis=2) > self.color_tolerance

    def _resize_mask(self, mask: np.ndarray) -> np.ndarray:
        s = self.template_size
        h, w = mask.shape
        rows = (np.arange(s) * h // s).clip(0, h - 1)
        cols = (np.arange(s) * w // s).clip(0, w - 1)
        # Block-mean pooling over the nearest grid; cheap and deterministic.
        ys = np.minimum(np.arange(s + 1) * h // s, h)
        xs = np.minimum(np.arange(s + 1) * w // s, w)
        out = np.zeros((s, s), dtype=np.float64)
        for i in range(s):
            y0, y1 = ys[i], max(ys[i + 1], ys[i] + 1)
            for j in range(s):
                x0, x1 = xs[j], max(xs[j + 1], xs[j] + 1)
                out[i, j] = mask[y0:y1, x0:x1].mean()
        return out

    def detect(self, image: np.ndarray, graph: SceneGraph) -> list[Detection]:
        background = self._background(image)
        h, w = image.shape[:2]
        out = []
        for node in graph.objects:
            if node.bbox is None:
                continue
            fg = self._node_foreground(image, node, background)
            x0, y0, x1, y1 = (int(round(v)) for v in node.bbox)
            x0, y0 = max(0, x0), max(0, y0)
            x1, y1 = min(w, max(x1, x0 + 2)), min(h, max(y1, y0 + 2))
            crop = fg[y0:y1, x0:x1].astype(np.float64)
            if crop.size == 0:
                continue
            fill = float(crop.mean())
            objectness = float(np.clip(fill / self._min_fill, 0.0, 1.0))
            tight = _tight(crop)
            if tight is None:
                out.append(Detection(node.class_id,
                                     (float(x0), float(y0), float(x1), float(y1)),
                                     0.0, 0.0))
                continue
            resized = self._resize_mask(tight)
            signed = 2.0 * resized - 1.0
            agreements = np.array(
                [float(np.mean(signed * (2.0 * t - 1.0))) for t in self.templates]
            )
            cls = int(np.argmax(agreements))
            class_score = float(np.clip((agreements[cls] + 1.0) / 2.0, 0.0, 1.0))
            out.append(
                Detection(cls, (float(x0), float(y0), float(x1), float(y1)),
                          objectness, class_score)
            )
        return out


def extract_annotations(
    gen_image: Optional[np.ndarray],
    requested_graph: SceneGraph,
    detections: Sequence[Detection],
    threshold: float = DEFAULT_THRESHOLD,
) -> SceneGraph:
    """Keep requested triples whose endpoint objects are verifiably detected.

    A detection qualifies for a node when classes match and both its
    scores are at or above ``threshold``. Assignment is greedy over
    (node, detection) pairs by descending class score; each detection is
    used for at most one node. Kept nodes adopt the matched detection's
    box; attributes are carried over from the request. Never invents a
    relation: output triples are a subset of the requested ones.
    """
    eligible = [
        (i, d)
        for i, d in enumerate(detections)
        if d.objectness_score >= threshold and d.class_score >= threshold
    ]
    pairs = []
    for node in requested_graph.objects:
        for i, det in eligible:
            if det.class_id == node.class_id:
                pairs.append((det.class_score, node.id, i))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    node_to_det: dict[int, int] = {}
    used: set[int] = set()
    for score, node_id, det_idx in pairs:
        if node_id in node_to_det or det_idx in used:
            continue
        node_to_det[node_id] = det_idx
        used.add(det_idx)

    kept_nodes = []
    for node in requested_graph.objects:
        det_idx = node_to_det.get(node.id)
        if det_idx is None:
            continue
        kept_nodes.append(
            ObjectNode(node.id, node.class_id, node.attributes,
                       detections[det_idx].bbox)
        )
    kept_ids = {n.id for n in kept_nodes}
    kept_rels = tuple(
        t
        for t in requested_graph.relations
        if t.subject_id in kept_ids and t.object_id in kept_ids
        and node_to_det[t.subject_id] != node_to_det[t.object_id]
    )
    return SceneGraph(tuple(kept_nodes), kept_rels, requested_graph.image_size)
