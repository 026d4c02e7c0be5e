"""Vector normalization, cosine similarity, and exact top-k retrieval.

All similarity math accumulates in float64 regardless of the storage dtype,
and candidate rows are reduced in a fixed order, so results are identical
across runs and thread counts. Ties are broken by ascending item id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, EmptyResultError
from .store import EmbeddingMatrix


@dataclass(frozen=True)
class RankedHit:
    item_id: str
    similarity: float


def concept_vectors(tokens: list[str], dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded unit vector per token, exactly orthonormal when dim >= len(tokens)."""
    raw = rng.normal(size=(dim, len(tokens)))
    if dim >= len(tokens):
        q, _ = np.linalg.qr(raw)
        vectors = q.T[: len(tokens)]
    else:
        vectors = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    return {token: vectors[i] for i, token in enumerate(tokens)}


def l2_normalize(v: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale `v` to unit norm; returns (vector, degenerate flag).

    The zero vector cannot be normalized and is returned unchanged with the
    degenerate flag set.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ArgumentError("cannot normalize a non-finite vector")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return v, True
    return v / norm, False


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between `a` and `b`, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"dim mismatch: {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ArgumentError("cosine similarity requires finite vectors")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ArgumentError("cosine similarity is undefined for the zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def top_k(
    query: np.ndarray,
    items: EmbeddingMatrix,
    ids: list[str],
    k: int,
    exclude: set[str] | frozenset[str] = frozenset(),
) -> list[RankedHit]:
    """Exact top-k rows of `items` by cosine similarity with `query`.

    Returns min(k, remaining) hits sorted by descending similarity, ties by
    ascending id. Exclusion is applied before ranking; excluding every row
    is an error.
    """
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if len(ids) != items.rows:
        raise ArgumentError(f"got {len(ids)} ids for {items.rows} rows")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != items.dim:
        raise ArgumentError(f"query dim {q.shape[0]} != items dim {items.dim}")
    if not np.all(np.isfinite(q)):
        raise ArgumentError("query vector must be finite")
    qnorm = float(np.linalg.norm(q))
    if qnorm == 0.0:
        raise ArgumentError("query vector must be non-zero")

    id_array = np.asarray(ids, dtype=str)
    if exclude:
        keep = np.fromiter((i not in exclude for i in ids), dtype=bool, count=len(ids))
        if not keep.any():
            raise EmptyResultError("every candidate item was excluded")
    else:
        keep = None

    data = items.data.astype(np.float64, copy=False)
    if keep is not None:
        data = data[keep]
        id_array = id_array[keep]
    row_norms = np.linalg.norm(data, axis=1)
    if np.any(row_norms == 0.0):
        zero_id = id_array[int(np.argmax(row_norms == 0.0))]
        raise ArgumentError(f"item {zero_id} has a zero embedding")
    sims = np.clip((data @ q) / (row_norms * qnorm), -1.0, 1.0)

    # lexsort: last key is primary, so rank by descending similarity then id
    order = np.lexsort((id_array, -sims))
    take = order[: min(k, order.shape[0])]
    return [RankedHit(str(id_array[i]), float(sims[i])) for i in take]
