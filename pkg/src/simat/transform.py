"""Delta vectors and the retrieval strategies built on them.

A transformation w1 -> w2 becomes a direction in embedding space, either as
the difference of the two word embeddings (single_word) or as the mean of
caption-embedding differences over all caption pairs that differ only in
the transformed slot (sentence_average). The direction, scaled by lambda,
is added to an image embedding and the nearest database images are
retrieved by cosine similarity.

Note on sentence_average: it is estimated from the benchmark's own
captions, which leaks evaluation data into the method; reports flag it as
caption_leaking so scores are not over-read.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError, CoverageError, TokenLookupError
from .geometry import RankedHit, top_k
from .store import CaptionRecord, Dataset, EmbeddingMatrix, TransformationQuery

STRATEGIES = ("delta", "image_to_text_to_image", "text_to_image")
STRATEGY_ALIASES = {"i2t2i": "image_to_text_to_image", "t2i": "text_to_image"}
DELTA_METHODS = ("single_word", "sentence_average")


def canonical_strategy(name: str) -> str:
    name = STRATEGY_ALIASES.get(name, name)
    if name not in STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
    return name


@dataclass(frozen=True)
class DeltaVector:
    """A semantic transformation direction in embedding space."""

    vector: np.ndarray
    method: str
    source_word: str
    target_word: str
    support_count: int = 1

    def __post_init__(self):
        if self.method not in DELTA_METHODS:
            raise ArgumentError(f"unknown delta method {self.method!r}")
        if self.support_count < 1:
            raise ArgumentError("support_count must be >= 1")
        if self.method == "single_word" and self.support_count != 1:
            raise ArgumentError("single_word deltas have support_count 1")
        if not np.all(np.isfinite(self.vector)):
            raise ArgumentError("delta vector must be finite")


@dataclass
class TransformConfig:
    """Knobs for one retrieval run (strength, strategy, neighborhood)."""

    lam: float = 1.0
    strategy: str = "delta"
    top_n: int = 1
    exclude_self: bool = True
    delta_method: str = "single_word"
    normalize_delta: bool = False

    def __post_init__(self):
        self.strategy = canonical_strategy(self.strategy)
        if self.top_n < 1:
            raise ConfigError(f"top_n must be >= 1, got {self.top_n}")
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.delta_method not in DELTA_METHODS:
            raise ConfigError(
                f"delta_method must be one of {DELTA_METHODS}, got {self.delta_method!r}"
            )

    @property
    def caption_leaking(self) -> bool:
        return self.delta_method == "sentence_average"


def word_delta(words: EmbeddingMatrix, word_row: dict[str, int], w1: str, w2: str) -> DeltaVector:
    """E(w2) - E(w1) from the word table."""
    for w in (w1, w2):
        if w not in word_row:
            raise TokenLookupError(f"no word embedding for {w!r}")
    v1 = words.row(word_row[w1]).astype(np.float64)
    v2 = words.row(word_row[w2]).astype(np.float64)
    return DeltaVector(v2 - v1, "single_word", w1, w2)


def sentence_average_delta(
    captions: list[CaptionRecord],
    caption_embeddings: EmbeddingMatrix,
    w1: str,
    w2: str,
    field_name: str,
) -> DeltaVector:
    """Mean of E(s2) - E(s1) over caption pairs differing only in `field_name`.

    s1 carries w1 in the slot, s2 carries w2, and the other two slots agree.
    """
    by_triplet = {rec.triplet: rec for rec in captions}
    diffs = []
    for rec in sorted(captions, key=lambda r: r.caption_id):
        if rec.triplet.get(field_name) != w1:
            continue
        partner = by_triplet.get(rec.triplet.replace(field_name, w2))
        if partner is None:
            continue
        s1 = caption_embeddings.row(rec.embedding_row).astype(np.float64)
        s2 = caption_embeddings.row(partner.embedding_row).astype(np.float64)
        diffs.append(s2 - s1)
    if not diffs:
        raise CoverageError(
            f"no caption pair realizes {w1!r} -> {w2!r} in field {field_name!r}"
        )
    mean = np.mean(np.stack(diffs), axis=0)
    return DeltaVector(mean, "sentence_average", w1, w2, support_count=len(diffs))


def apply_transform(image_emb: np.ndarray, delta: DeltaVector, lam: float) -> np.ndarray:
    """x = image embedding + lambda * delta, unnormalized (ranking is cosine)."""
    image_emb = np.asarray(image_emb, dtype=np.float64)
    if image_emb.shape != delta.vector.shape:
        raise ArgumentError(
            f"dim mismatch: image {image_emb.shape} vs delta {delta.vector.shape}"
        )
    return image_emb + lam * delta.vector


def build_delta(dataset: Dataset, query: TransformationQuery, cfg: TransformConfig) -> DeltaVector:
    if cfg.delta_method == "single_word":
        delta = word_delta(
            dataset.word_embeddings, dataset.word_row, query.source_word, query.target_word
        )
    else:
        delta = sentence_average_delta(
            dataset.captions,
            dataset.caption_embeddings,
            query.source_word,
            query.target_word,
            query.field,
        )
    if cfg.normalize_delta:
        norm = float(np.linalg.norm(delta.vector))
        if norm > 0:
            delta = DeltaVector(
                delta.vector / norm,
                delta.method,
                delta.source_word,
                delta.target_word,
                delta.support_count,
            )
    return delta


def run_query(
    dataset: Dataset, query: TransformationQuery, cfg: TransformConfig
) -> list[RankedHit]:
    """Retrieve top_n images for one transformation query under `cfg`."""
    if query.image_id not in dataset.image_by_id:
        raise TokenLookupError(f"unknown image {query.image_id!r}")
    if query.target_caption_id not in dataset.caption_by_id:
        raise TokenLookupError(f"unknown caption {query.target_caption_id!r}")
    exclude = frozenset({query.image_id}) if cfg.exclude_self else frozenset()

    if cfg.strategy == "text_to_image":
        x = dataset.caption_vector(query.target_caption_id).astype(np.float64)
    elif cfg.strategy == "delta":
        delta = build_delta(dataset, query, cfg)
        x = apply_transform(dataset.image_vector(query.image_id), delta, cfg.lam)
    else:  # image_to_text_to_image
        caption_hits = top_k(
            dataset.image_vector(query.image_id),
            dataset.caption_embeddings,
            [rec.caption_id for rec in dataset.captions],
            k=1,
        )
        nearest = dataset.caption_vector(caption_hits[0].item_id).astype(np.float64)
        delta = build_delta(dataset, query, cfg)
        x = apply_transform(nearest, delta, cfg.lam)

    return top_k(x, dataset.image_embeddings, dataset.image_ids, cfg.top_n, exclude)
