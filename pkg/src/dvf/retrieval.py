"""Embedding store, exact cosine search and Recall@K.

Every test image is a query against the whole test store with itself
excluded. Ties in similarity go to the lower row index.
"""

from __future__ import annotations

import json
import struct
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from dvf.checkpoint import atomic_write
from dvf.dataset import ImageFeed
from dvf.errors import ConfigurationError, DataError

DEFAULT_KS = (1, 2, 4, 8)
MAGIC = b"DVFE"
VERSION = 1
_HEAD = struct.Struct("<4sIIII")  # magic, version, count, dim, json length


@dataclass
class EmbeddingStore:
    ids: list[str]
    labels: list[int]
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or len(self.matrix) != len(self.ids):
            raise DataError(f"matrix shape {self.matrix.shape} does not match {len(self.ids)} ids")
        if len(self.ids) != len(self.labels):
            raise DataError("ids and labels differ in length")
        norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
        if len(norms) and np.abs(norms - 1.0).max() > 1e-6:
            raise DataError("embedding store rows must be L2-normalized")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding store ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_vectors(cls, ids, labels, vectors) -> "EmbeddingStore":
        v = np.asarray(vectors, dtype=np.float64)
        if len(v):
            v = v / np.linalg.norm(v, axis=1, keepdims=True)
        return cls(list(ids), [int(l) for l in labels], v.astype(np.float32))

    def to_bytes(self) -> bytes:
        meta = json.dumps({"ids": self.ids, "labels": self.labels}, separators=(",", ":")).encode()
        count, dim = self.matrix.shape
        return _HEAD.pack(MAGIC, VERSION, count, dim, len(meta)) + meta + self.matrix.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "EmbeddingStore":
        if len(blob) < _HEAD.size:
            raise DataError(f"{source}: truncated embedding store")
        magic, version, count, dim, meta_len = _HEAD.unpack_from(blob)
        if magic != MAGIC or version != VERSION:
            raise DataError(f"{source}: not a version-{VERSION} DVFE store")
        meta = json.loads(blob[_HEAD.size : _HEAD.size + meta_len])
        start = _HEAD.size + meta_len
        if len(blob) - start != 4 * count * dim:
            raise DataError(f"{source}: payload size does not match {count}x{dim}")
        matrix = np.frombuffer(blob, dtype="<f4", offset=start).reshape(count, dim).copy()
        return cls(meta["ids"], meta["labels"], matrix)

    def save(self, path: str | Path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"embedding store {path} not found; run `dvf embed` first")
        return cls.from_bytes(path.read_bytes(), str(path))


@torch.no_grad()
def embed_corpus(records, model, batch_size: int = 64) -> EmbeddingStore:
    """Eval-mode embeddings (center crop, no augmentation), one row per record."""
    records = list(records)
    dim = model.cfg.encoder.dim
    if not records:
        return EmbeddingStore([], [], np.zeros((0, dim), dtype=np.float32))
    was_training = model.training
    model.eval()
    feed = ImageFeed(records, model.cfg.encoder.image_size, cache=False)
    rows = []
    for start in range(0, len(records), batch_size):
        images = feed.eval_batch(range(start, min(start + batch_size, len(records))))
        rows.append(model(images.to(next(model.parameters()).dtype)).float().numpy())
    model.train(was_training)
    return EmbeddingStore([r.id for r in records], [r.label for r in records], np.concatenate(rows))


def _similarities(store: EmbeddingStore) -> np.ndarray:
    m = store.matrix.astype(np.float64)
    return m @ m.T


def _ranked(sims_row: np.ndarray, exclude: int | None) -> np.ndarray:
    order = np.argsort(-sims_row, kind="stable")
    return order[order != exclude] if exclude is not None else order


def knn(store: EmbeddingStore, query_index: int, K: int) -> list[int]:
    """Row indices of the K most similar entries to row ``query_index`` (itself excluded)."""
    if not 1 <= K <= len(store) - 1:
        raise ConfigurationError(f"K must lie in [1, {len(store) - 1}], got {K}")
    sims = store.matrix.astype(np.float64) @ store.matrix[query_index].astype(np.float64)
    return _ranked(sims, query_index)[:K].tolist()


def search(store: EmbeddingStore, vector: np.ndarray, K: int, exclude_id: str | None = None) -> list[tuple[str, float]]:
    v = np.asarray(vector, dtype=np.float64)
    v = v / np.linalg.norm(v)
    sims = store.matrix.astype(np.float64) @ v
    exclude = store.ids.index(exclude_id) if exclude_id in store.ids else None
    order = _ranked(sims, exclude)[:K]
    return [(store.ids[i], float(sims[i])) for i in order]


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    per_query: list[dict]
    config_snapshot: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "per_query": self.per_query,
            "config_snapshot": self.config_snapshot,
            "warnings": self.warnings,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EvalReport":
        return cls(
            {int(k): float(v) for k, v in payload["recall_at"].items()},
            payload["per_query"],
            payload.get("config_snapshot", {}),
            payload.get("warnings", []),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def recall_at_k(store: EmbeddingStore, Ks: Sequence[int] = DEFAULT_KS, config_snapshot: dict | None = None) -> EvalReport:
    n = len(store)
    Ks = sorted(set(int(k) for k in Ks))
    if n < 2:
        raise ConfigurationError("Recall@K needs at least two stored embeddings")
    if not Ks or Ks[0] < 1 or Ks[-1] > n - 1:
        raise ConfigurationError(f"every K must lie in [1, {n - 1}], got {Ks}")
    labels = np.asarray(store.labels)
    notes = []
    singletons = sorted(l for l, c in Counter(store.labels).items() if c < 2)
    if singletons:
        notes.append(f"labels with a single image (no possible hit): {singletons}")
        warnings.warn(notes[-1])

    sims = _similarities(store)
    k_max = Ks[-1]
    hits = {k: 0 for k in Ks}
    per_query = []
    for q in range(n):
        top = _ranked(sims[q], q)[:k_max]
        match = np.flatnonzero(labels[top] == labels[q])
        rank = int(match[0]) + 1 if match.size else None
        for k in Ks:
            hits[k] += rank is not None and rank <= k
        per_query.append({"query_id": store.ids[q], "top_ids": [store.ids[i] for i in top], "hit_rank": rank})
    recall = {k: hits[k] / n for k in Ks}
    return EvalReport(recall, per_query, config_snapshot or {}, notes)


def format_table(rows: dict[str, dict[int, float]], Ks: Sequence[int] = DEFAULT_KS) -> str:
    """Setting | R@1 | R@2 ... with the stored values printed verbatim."""
    header = ["Setting"] + [f"R@{k}" for k in Ks]
    body = [[name] + [repr(float(rec[k])) if k in rec else "-" for k in Ks] for name, rec in rows.items()]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in [header] + body]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)
