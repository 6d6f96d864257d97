"""JSON-lines dataset manifests binding images, graphs, captions, provenance.

A manifest file starts with one header line (format version, vocabulary,
image size) followed by one record per line. Records reference images by
path relative to the manifest's directory. Serialization is canonical
(sorted keys, no whitespace), so equal datasets produce byte-identical
files.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .captions import CaptionMapping, TokenSeq
from .graphs import SceneGraph, Vocab, canonical_json, graph_from_dict, _graph_to_dict

GENERATOR_LABELS = ("baseline", "config-1", "config-2", "config-3", "config-4")
PROVENANCES = ("real",) + tuple(f"synthetic:{g}" for g in GENERATOR_LABELS)


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    graph: SceneGraph
    caption: Optional[CaptionMapping] = None
    freeform: Optional[TokenSeq] = None
    provenance: str = "real"
    seed: int = 0

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance {self.provenance!r} not in {PROVENANCES}")

    def to_dict(self, vocab: Vocab) -> dict:
        return {
            "image": self.image_path,
            "graph": _graph_to_dict(self.graph, vocab),
            "caption": self.caption.to_dict() if self.caption else None,
            "freeform": list(self.freeform.tokens) if self.freeform else None,
            "provenance": self.provenance,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(data: dict, vocab: Vocab) -> "ManifestRecord":
        caption = data.get("caption")
        freeform = data.get("freeform")
        return ManifestRecord(
            image_path=data["image"],
            graph=graph_from_dict(data["graph"], vocab),
            caption=CaptionMapping.from_dict(caption) if caption else None,
            freeform=TokenSeq(tuple(freeform)) if freeform else None,
            provenance=data["provenance"],
            seed=int(data.get("seed", 0)),
        )


@dataclass
class DatasetManifest:
    vocab: Vocab
    image_size: tuple[int, int]
    records: list[ManifestRecord] = field(default_factory=list)
    base_dir: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ManifestRecord]:
        return iter(self.records)

    def resolve(self, record: ManifestRecord) -> Path:
        if self.base_dir is None:
            return Path(record.image_path)
        return Path(self.base_dir) / record.image_path

    def load_image(self, record: ManifestRecord) -> np.ndarray:
        with Image.open(self.resolve(record)) as im:
            return np.asarray(im.convert("RGB"))

    def to_text(self) -> str:
        header = {
            "kind": "sgaug-manifest",
            "version": 1,
            "vocab": self.vocab.to_dict(),
            "image_size": list(self.image_size),
        }
        lines = [canonical_json(header)]
        lines.extend(canonical_json(r.to_dict(self.vocab)) for r in self.records)
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        self.base_dir = path.parent
        return path

    @staticmethod
    def load(path) -> "DatasetManifest":
        import json

        path = Path(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty manifest")
        header = json.loads(lines[0])
        if header.get("kind") != "sgaug-manifest":
            raise ValueError(f"{path}: not a dataset manifest")
        vocab = Vocab.from_dict(header["vocab"])
        records = [
            ManifestRecord.from_dict(json.loads(line), vocab)
            for line in lines[1:]
            if line.strip()
        ]
        return DatasetManifest(
            vocab=vocab,
            image_size=tuple(header["image_size"]),
            records=records,
            base_dir=path.parent,
        )

    def with_records(self, records) -> "DatasetManifest":
        return DatasetManifest(self.vocab, self.image_size, list(records), self.base_dir)


def save_png(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")
