"""Two-stage scene-graph-generation model with TDE debiasing.

Stage one classifies objects from box crops; stage two scores predicates
for ordered object pairs from [union-crop visual features; pair geometry;
soft class embeddings] plus a frequency-bias table of P(predicate | class
pair) estimated from training annotations.

Debiasing follows the total-direct-effect recipe: alongside the full
prediction, a counterfactual prediction is computed with the visual
features replaced by their training-set mean while the class-pair context
(embeddings, geometry, frequency bias) is retained; the difference
between the two logit vectors is the debiased score.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .graphs import SceneGraph, Vocab
from .manifest import DatasetManifest
from .metrics import RelPrediction
from .world import box_iou


class EmptyDatasetError(ValueError):
    """No trainable records (after excluding relation-less images)."""


def tde_scores(full_logits, counterfactual_logits) -> np.ndarray:
    """Debiased per-predicate scores: full minus counterfactual logits."""
    full = np.asarray(full_logits, dtype=np.float64)
    cf = np.asarray(counterfactual_logits, dtype=np.float64)
    if full.shape != cf.shape:
        raise ValueError(f"length mismatch: {full.shape} vs {cf.shape}")
    return full - cf


@dataclass(frozen=True)
class SggHyper:
    crop_size: int = 8
    hidden_obj: int = 64
    hidden_rel: int = 96
    class_emb_dim: int = 16
    obj_epochs: int = 40
    rel_epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3
    neg_per_image: int = 4
    bias_smoothing: float = 1.0
    use_tde: bool = True
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _nearest_resize(img: np.ndarray, box, size: int) -> np.ndarray:
    """Nearest-neighbor crop resize; img is uint8 HxWx3, box (x0,y0,x1,y1)."""
    h, w = img.shape[:2]
    x0 = int(np.clip(round(box[0]), 0, w - 1))
    y0 = int(np.clip(round(box[1]), 0, h - 1))
    x1 = int(np.clip(round(box[2]), x0 + 1, w))
    y1 = int(np.clip(round(box[3]), y0 + 1, h))
    ch, cw = y1 - y0, x1 - x0
    yi = y0 + ((np.arange(size) + 0.5) * ch / size).astype(int).clip(0, ch - 1)
    xi = x0 + ((np.arange(size) + 0.5) * cw / size).astype(int).clip(0, cw - 1)
    return img[yi[:, None], xi[None, :]]


def object_features(img: np.ndarray, box, image_size, crop_size: int) -> np.ndarray:
    w, h = image_size
    crop = _nearest_resize(img, box, crop_size).astype(np.float32) / 255.0
    rel = np.array(
        [(box[2] - box[0]) / w, (box[3] - box[1]) / h], dtype=np.float32
    )
    return np.concatenate([crop.reshape(-1), rel])


def pair_geometry(box_s, box_o, image_size) -> np.ndarray:
    w, h = image_size
    s = np.array(box_s, dtype=np.float32) / np.array([w, h, w, h], dtype=np.float32)
    o = np.array(box_o, dtype=np.float32) / np.array([w, h, w, h], dtype=np.float32)
    scx, scy = (s[0] + s[2]) / 2, (s[1] + s[3]) / 2
    ocx, ocy = (o[0] + o[2]) / 2, (o[1] + o[3]) / 2
    sw, sh = s[2] - s[0], s[3] - s[1]
    ow, oh = o[2] - o[0], o[3] - o[1]
    return np.concatenate(
        [
            s,
            o,
            [ocx - scx, ocy - scy],
            [np.log(max(sw * sh, 1e-6) / max(ow * oh, 1e-6))],
            [box_iou(box_s, box_o)],
            [np.hypot(ocx - scx, ocy - scy)],
        ]
    ).astype(np.float32)


GEO_DIM = 13


def union_box(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def frequency_bias(
    triples: Sequence[tuple[int, int, int]], n_obj: int, n_pred_bg: int,
    smoothing: float = 1.0,
) -> np.ndarray:
    """P(predicate-with-background | subject class, object class); rows sum to 1."""
    counts = np.full((n_obj, n_obj, n_pred_bg), smoothing, dtype=np.float64)
    for s_cls, pred, o_cls in triples:
        counts[s_cls, o_cls, pred] += 1.0
    return counts / counts.sum(axis=2, keepdims=True)


class SggModel:
    """Object classifier + relation classifier + frequency bias + TDE."""

    def __init__(self, vocab: Vocab, hyper: SggHyper = SggHyper()):
        self.vocab = vocab
        self.hyper = hyper
        self.n_obj = len(vocab.object_classes)
        self.n_pred = len(vocab.predicate_classes)
        torch.manual_seed(hyper.seed)
        obj_in = hyper.crop_size * hyper.crop_size * 3 + 2
        rel_in = (
            hyper.crop_size * hyper.crop_size * 3
            + GEO_DIM
            + 2 * hyper.class_emb_dim
        )
        self.obj_head = nn.Sequential(
            nn.Linear(obj_in, hyper.hidden_obj),
            nn.ReLU(),
            nn.Linear(hyper.hidden_obj, self.n_obj),
        )
        self.rel_head = nn.Sequential(
            nn.Linear(rel_in, hyper.hidden_rel),
            nn.ReLU(),
            nn.Linear(hyper.hidden_rel, self.n_pred + 1),
        )
        self.class_emb = nn.Embedding(self.n_obj, hyper.class_emb_dim)
        self.bias_table = np.full(
            (self.n_obj, self.n_obj, self.n_pred + 1), 1.0 / (self.n_pred + 1)
        )
        self.mean_visual = np.zeros(hyper.crop_size * hyper.crop_size * 3,
                                    dtype=np.float32)
        self.history: dict[str, list[float]] = {"object_loss": [], "relation_loss": []}

    # -- training ----------------------------------------------------------

    def _gather(self, manifest: DatasetManifest, rng: np.random.Generator):
        """Flatten manifest records into object and pair training rows."""
        cs = self.hyper.crop_size
        obj_x, obj_y = [], []
        pair_vis, pair_geo, pair_sc, pair_oc, pair_y = [], [], [], [], []
        bias_rows = []
        for rec in manifest.records:
            if not rec.graph.relations:
                continue
            img = manifest.load_image(rec)
            size = rec.graph.image_size or manifest.image_size
            nodes = {n.id: n for n in rec.graph.objects if n.bbox is not None}
            for n in nodes.values():
                obj_x.append(object_features(img, n.bbox, size, cs))
                obj_y.append(n.class_id)
            positive_pairs = set()
            for t in rec.graph.relations:
                s, o = nodes.get(t.subject_id), nodes.get(t.object_id)
                if s is None or o is None:
                    continue
                positive_pairs.add((t.subject_id, t.object_id))
                u = union_box(s.bbox, o.bbox)
                vis = _nearest_resize(img, u, cs).astype(np.float32).reshape(-1) / 255.0
                pair_vis.append(vis)
                pair_geo.append(pair_geometry(s.bbox, o.bbox, size))
                pair_sc.append(s.class_id)
                pair_oc.append(o.class_id)
                pair_y.append(t.predicate_id)
                bias_rows.append((s.class_id, t.predicate_id, o.class_id))
            ids = sorted(nodes)
            negatives = [
                (a, b)
                for a in ids
                for b in ids
                if a != b and (a, b) not in positive_pairs
            ]
            if negatives:
                take = min(self.hyper.neg_per_image, len(negatives))
                chosen = rng.choice(len(negatives), size=take, replace=False)
                for ci in chosen:
                    a, b = negatives[int(ci)]
                    s, o = nodes[a], nodes[b]
                    u = union_box(s.bbox, o.bbox)
                    vis = _nearest_resize(img, u, cs).astype(np.float32).reshape(-1) / 255.0
                    pair_vis.append(vis)
                    pair_geo.append(pair_geometry(s.bbox, o.bbox, size))
                    pair_sc.append(s.class_id)
                    pair_oc.append(o.class_id)
                    pair_y.append(self.n_pred)  # background
        if not pair_y:
            raise EmptyDatasetError("no records with relations to train on")
        return (
            np.stack(obj_x),
            np.array(obj_y),
            np.stack(pair_vis),
            np.stack(pair_geo),
            np.array(pair_sc),
            np.array(pair_oc),
            np.array(pair_y),
            bias_rows,
        )

    def fit(self, manifest: DatasetManifest) -> "SggModel":
        rng = np.random.default_rng(self.hyper.seed)
        (obj_x, obj_y, p_vis, p_geo, p_sc, p_oc, p_y, bias_rows) = self._gather(
            manifest, rng
        )
        self.bias_table = frequency_bias(
            bias_rows, self.n_obj, self.n_pred + 1, self.hyper.bias_smoothing
        )
        self.mean_visual = p_vis.mean(axis=0)

        obj_xt = torch.as_tensor(obj_x)
        obj_yt = torch.as_tensor(obj_y, dtype=torch.long)
        opt = torch.optim.Adam(
            list(self.obj_head.parameters()) + list(self.class_emb.parameters()),
            lr=self.hyper.lr,
        )
        ce = nn.CrossEntropyLoss()
        n = len(obj_yt)
        bs = self.hyper.batch_size
        for _ in range(self.hyper.obj_epochs):
            order = rng.permutation(n)
            losses = []
            for i in range(0, n, bs):
                idx = torch.as_tensor(order[i : i + bs])
                loss = ce(self.obj_head(obj_xt[idx]), obj_yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            self.history["object_loss"].append(float(np.mean(losses)))

        # Relation stage: visual + geometry + frozen class context. Training
        # uses ground-truth classes for the context embeddings; inference
        # substitutes the object head's soft predictions.
        sc_emb = self.class_emb(torch.as_tensor(p_sc, dtype=torch.long)).detach()
        oc_emb = self.class_emb(torch.as_tensor(p_oc, dtype=torch.long)).detach()
        rel_x = torch.cat(
            [torch.as_tensor(p_vis), torch.as_tensor(p_geo), sc_emb, oc_emb], dim=1
        )
        rel_y = torch.as_tensor(p_y, dtype=torch.long)
        bias_logit = torch.as_tensor(
            np.log(self.bias_table[p_sc, p_oc] + 1e-9), dtype=torch.float32
        )
        opt_rel = torch.optim.Adam(self.rel_head.parameters(), lr=self.hyper.lr)
        n = len(rel_y)
        for _ in range(self.hyper.rel_epochs):
            order = rng.permutation(n)
            losses = []
            for i in range(0, n, bs):
                idx = torch.as_tensor(order[i : i + bs])
                logits = self.rel_head(rel_x[idx]) + bias_logit[idx]
                loss = ce(logits, rel_y[idx])
                opt_rel.zero_grad()
                loss.backward()
                opt_rel.step()
                losses.append(float(loss.detach()))
            self.history["relation_loss"].append(float(np.mean(losses)))
        return self

    # -- inference ---------------------------------------------------------

    def predict(self, img: np.ndarray, boxes: Sequence[tuple],
                image_size: Optional[tuple[int, int]] = None) -> list[RelPrediction]:
        """Class and relation hypotheses for every ordered box pair.

        Classes are predicted from pixels (boxes given, labels not);
        predicate scores are the TDE-debiased distribution weighted by
        both endpoint class confidences.
        """
        if image_size is None:
            image_size = (img.shape[1], img.shape[0])
        cs = self.hyper.crop_size
        if len(boxes) == 0:
            return []
        with torch.no_grad():
            feats = torch.as_tensor(
                np.stack([object_features(img, b, image_size, cs) for b in boxes])
            )
            probs = torch.softmax(self.obj_head(feats), dim=-1)
            cls_emb = (probs @ self.class_emb.weight)
            cls_ids = probs.argmax(dim=-1).numpy()
            cls_conf = probs.max(dim=-1).values.numpy()

            rows = []
            meta = []
            mean_vis = torch.as_tensor(self.mean_visual)
            for i in range(len(boxes)):
                for j in range(len(boxes)):
                    if i == j:
                        continue
                    u = union_box(boxes[i], boxes[j])
                    vis = torch.as_tensor(
                        _nearest_resize(img, u, cs).astype(np.float32).reshape(-1)
                        / 255.0
                    )
                    geo = torch.as_tensor(pair_geometry(boxes[i], boxes[j], image_size))
                    ctx = torch.cat([cls_emb[i], cls_emb[j]])
                    rows.append((torch.cat([vis, geo, ctx]),
                                 torch.cat([mean_vis, geo, ctx])))
                    meta.append((i, j))
            if not rows:
                return []
            full_in = torch.stack([r[0] for r in rows])
            cf_in = torch.stack([r[1] for r in rows])
            bias = torch.as_tensor(
                np.log(self.bias_table[cls_ids[[m[0] for m in meta]],
                                       cls_ids[[m[1] for m in meta]]] + 1e-9),
                dtype=torch.float32,
            )
            full_logits = (self.rel_head(full_in) + bias).numpy()
            cf_logits = (self.rel_head(cf_in) + bias).numpy()

        out = []
        for row, (i, j) in enumerate(meta):
            if self.hyper.use_tde:
                logits = tde_scores(full_logits[row], cf_logits[row])
            else:
                logits = full_logits[row].astype(np.float64)
            pred_logits = logits[: self.n_pred]
            ex = np.exp(pred_logits - pred_logits.max())
            pred_probs = ex / ex.sum()
            pair_conf = float(cls_conf[i] * cls_conf[j])
            out.append(
                RelPrediction(
                    subject_box=tuple(boxes[i]),
                    subject_class=int(cls_ids[i]),
                    object_box=tuple(boxes[j]),
                    object_class=int(cls_ids[j]),
                    scores=tuple(pair_conf * pred_probs),
                )
            )
        return out

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        arrays = {
            "bias_table": self.bias_table,
            "mean_visual": self.mean_visual,
        }
        for prefix, module in (
            ("obj_head", self.obj_head),
            ("rel_head", self.rel_head),
            ("class_emb", self.class_emb),
        ):
            for name, param in module.state_dict().items():
                arrays[f"{prefix}.{name}"] = param.detach().numpy()
        meta = {
            "hyper": self.hyper.to_dict(),
            "vocab": self.vocab.to_dict(),
            "vocab_hash": self.vocab.content_hash(),
        }
        ckpt.save_arrays(path, arrays, meta)

    @staticmethod
    def load(path) -> "SggModel":
        arrays, meta = ckpt.load_arrays(path)
        model = SggModel(Vocab.from_dict(meta["vocab"]), SggHyper(**meta["hyper"]))
        model.bias_table = arrays["bias_table"]
        model.mean_visual = arrays["mean_visual"]
        with torch.no_grad():
            for prefix, module in (
                ("obj_head", model.obj_head),
                ("rel_head", model.rel_head),
                ("class_emb", model.class_emb),
            ):
                state = {
                    name[len(prefix) + 1 :]: torch.as_tensor(arr)
                    for name, arr in arrays.items()
                    if name.startswith(prefix + ".")
                }
                module.load_state_dict(state)
        return model


def train_sgg(manifest: DatasetManifest, hyper: SggHyper = SggHyper()) -> SggModel:
    """Train the two-stage model; raises EmptyDatasetError when unusable."""
    usable = [r for r in manifest.records if r.graph.relations]
    if not usable:
        raise EmptyDatasetError("manifest holds no records with relations")
    return SggModel(manifest.vocab, hyper).fit(manifest)
