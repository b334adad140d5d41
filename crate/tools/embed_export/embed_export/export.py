import csv
import json
import os
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .formats import NUM_GRADES, write_container, write_prompt_file

SEVERITY = ["no", "mild", "moderate", "severe", "proliferative"]
DEFAULT_PROMPTS = [f"a fundus photograph showing {w} diabetic retinopathy" for w in SEVERITY]


class Encoder(Protocol):
    """Frozen vision-language model. Implementations must be deterministic."""

    checkpoint: str
    # resize / crop / normalisation actually applied; recorded in the header
    preprocessing: dict

    def encode_images(self, paths: Sequence[str], kind: str) -> List[np.ndarray]:
        """`kind` is "global" (D,) or "feature-map" (C, H, W)."""

    def encode_texts(self, texts: Sequence[str]) -> np.ndarray:
        """(len(texts), D)."""


@dataclass
class ExportJob:
    manifest: str
    checkpoint: str
    out: str
    kind: str = "global"
    batch_size: int = 32
    image_root: Optional[str] = None

    def __post_init__(self):
        if not self.checkpoint:
            raise ValueError("checkpoint id is required")
        if self.kind not in ("global", "feature-map"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ExportResult:
    exported: List[str] = field(default_factory=list)
    # (image_id, reason) for images that could not be read
    exceptions: List[Tuple[str, str]] = field(default_factory=list)


def _manifest_rows(job):
    root = job.image_root or os.path.dirname(os.path.abspath(job.manifest))
    with open(job.manifest, newline="") as f:
        for row in csv.DictReader(f):
            path = row["filepath"]
            if not os.path.isabs(path):
                path = os.path.join(root, path)
            yield row["image_id"], path


def export_image_features(job: ExportJob, encoder: Encoder) -> ExportResult:
    if encoder.checkpoint != job.checkpoint:
        raise ValueError(f"encoder holds {encoder.checkpoint!r}, job wants {job.checkpoint!r}")
    result = ExportResult()
    readable = []
    for image_id, path in _manifest_rows(job):
        if os.path.isfile(path) and os.access(path, os.R_OK):
            readable.append((image_id, path))
        else:
            result.exceptions.append((image_id, f"unreadable: {path}"))

    entries = []
    for start in range(0, len(readable), job.batch_size):
        batch = readable[start:start + job.batch_size]
        try:
            feats = encoder.encode_images([p for _, p in batch], job.kind)
        except Exception:
            # retry one by one so a single bad image doesn't sink the batch
            feats = []
            for image_id, path in batch:
                try:
                    feats.append(encoder.encode_images([path], job.kind)[0])
                except Exception as e:  # noqa: BLE001
                    result.exceptions.append((image_id, f"decode failed: {e}"))
                    feats.append(None)
        for (image_id, _), f in zip(batch, feats):
            if f is not None:
                entries.append((image_id, np.asarray(f, dtype=np.float32)))
                result.exported.append(image_id)

    meta = {
        "checkpoint": job.checkpoint,
        "kind": job.kind,
        "preprocessing": encoder.preprocessing,
        "source_manifest": os.path.basename(job.manifest),
    }
    write_container(job.out, entries, json.dumps(meta, sort_keys=True))
    if result.exceptions:
        with open(job.out + ".exceptions.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["image_id", "reason"])
            w.writerows(result.exceptions)
    return result


def export_prompt_embeddings(texts: Sequence[str], encoder: Encoder, out: str) -> np.ndarray:
    texts = list(texts)
    if len(texts) != NUM_GRADES:
        raise ValueError(f"need exactly {NUM_GRADES} prompts in grade order, got {len(texts)}")
    rows = np.asarray(encoder.encode_texts(texts), dtype=np.float32)
    write_prompt_file(out, texts, rows)
    return rows
