"""Benchmark construction from scene-graph annotations.

Stages, in order: keep triplets whose subject/relation are allowlisted,
prune objects (two-relation rule, then per-pair frequency cut), enumerate
transformation queries against the realized triplet set, render captions,
drop queries the oracle cannot certify, weight by inverse square root of
transformation frequency, and split images 50/50 into dev/test.

Each stage is a pure function over record lists so fixtures stay small and
every step can be recomputed by brute force in tests.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, CoverageError, GenerationError, StorageError, ValidationError
from .geometry import concept_vectors
from .store import (
    CaptionRecord,
    Dataset,
    EmbeddingMatrix,
    ImageRecord,
    Triplet,
    TransformationQuery,
    read_tsv,
)

DEFAULT_CAPTION_TEMPLATE = "A {subject} {relation} a {object}"


@dataclass(frozen=True)
class SceneGraphEntry:
    image_id: str
    triplet: Triplet


@dataclass
class BuildConfig:
    subject_allowlist: frozenset[str] = frozenset()
    relation_allowlist: frozenset[str] = frozenset()
    max_objects_per_pair: int = 10
    min_images_per_triplet: int = 2
    oracle_hi: float = 0.9
    oracle_lo: float = 0.1
    split_seed: int = 0
    caption_template: str = DEFAULT_CAPTION_TEMPLATE

    def __post_init__(self):
        if not (0.0 <= self.oracle_lo < self.oracle_hi <= 1.0):
            raise ConfigError(
                f"need 0 <= oracle_lo < oracle_hi <= 1, got {self.oracle_lo}/{self.oracle_hi}"
            )
        if self.max_objects_per_pair < 1:
            raise ConfigError("max_objects_per_pair must be >= 1")
        if self.min_images_per_triplet < 1:
            raise ConfigError("min_images_per_triplet must be >= 1")


def filter_triplets(entries: list[SceneGraphEntry], cfg: BuildConfig) -> list[SceneGraphEntry]:
    """Keep entries whose subject and relation are both allowlisted."""
    if not cfg.subject_allowlist or not cfg.relation_allowlist:
        raise ConfigError("subject and relation allowlists must be non-empty")
    return [
        e
        for e in entries
        if e.triplet.subject in cfg.subject_allowlist
        and e.triplet.relation in cfg.relation_allowlist
    ]


def filter_objects(entries: list[SceneGraphEntry], cfg: BuildConfig) -> list[SceneGraphEntry]:
    """Two-step object pruning.

    Step 1 drops objects that appear with fewer than two distinct relations
    (over distinct triplets). Step 2 keeps, per (subject, relation) pair,
    only the max_objects_per_pair most frequent objects by entry count,
    ties resolved toward the lexicographically smaller token.
    """
    relations_per_object: dict[str, set[str]] = defaultdict(set)
    for e in entries:
        relations_per_object[e.triplet.object].add(e.triplet.relation)
    step1 = [e for e in entries if len(relations_per_object[e.triplet.object]) >= 2]

    pair_counts: dict[tuple[str, str], Counter] = defaultdict(Counter)
    for e in step1:
        pair_counts[(e.triplet.subject, e.triplet.relation)][e.triplet.object] += 1
    kept_objects: dict[tuple[str, str], set[str]] = {}
    for pair, counts in pair_counts.items():
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept_objects[pair] = {obj for obj, _ in ranked[: cfg.max_objects_per_pair]}
    return [
        e
        for e in step1
        if e.triplet.object in kept_objects[(e.triplet.subject, e.triplet.relation)]
    ]


def keep_min_image_triplets(
    entries: list[SceneGraphEntry], cfg: BuildConfig
) -> list[SceneGraphEntry]:
    """Keep entries whose triplet is realized by at least min_images_per_triplet images."""
    counts = Counter(e.triplet for e in entries)
    return [e for e in entries if counts[e.triplet] >= cfg.min_images_per_triplet]


def build_queries(images: list[ImageRecord]) -> list[tuple[ImageRecord, str, str, Triplet]]:
    """Enumerate all (image, field, target word, target triplet) substitutions.

    A substitution is admissible when the substituted triplet is itself
    realized by some image. Returned in canonical (image_id, field, target)
    order; caption ids and query ids are attached later.
    """
    realized = {img.triplet for img in images}
    out: list[tuple[ImageRecord, str, str, Triplet]] = []
    values: dict[str, set[str]] = {
        "subject": {t.subject for t in realized},
        "relation": {t.relation for t in realized},
        "object": {t.object for t in realized},
    }
    for img in sorted(images, key=lambda r: r.image_id):
        for field_name in ("subject", "relation", "object"):
            current = img.triplet.get(field_name)
            for candidate in sorted(values[field_name]):
                if candidate == current:
                    continue
                target = img.triplet.replace(field_name, candidate)
                if target in realized:
                    out.append((img, field_name, candidate, target))
    return out


def render_caption(triplet: Triplet, template: str = DEFAULT_CAPTION_TEMPLATE) -> str:
    """Render a natural-language caption; 'an' before vowel-initial tokens."""
    for placeholder in ("{subject}", "{relation}", "{object}"):
        if placeholder not in template:
            raise ConfigError(f"caption template is missing {placeholder}")
    try:
        text = template.format(
            subject=triplet.subject, relation=triplet.relation, object=triplet.object
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise ConfigError(f"malformed caption template {template!r}: {exc}") from exc
    text = _fix_articles(text)
    return text[:1].upper() + text[1:]


def _fix_articles(text: str) -> str:
    # "a elephant" -> "an elephant"; applied to the template's own articles
    words = text.split(" ")
    fixed = []
    for i, word in enumerate(words):
        if word.lower() == "a" and i + 1 < len(words) and words[i + 1][:1].lower() in "aeiou":
            fixed.append("an" if word == "a" else "An")
        else:
            fixed.append(word)
    return " ".join(fixed)


def make_captions(
    triplets: list[Triplet],
    template: str = DEFAULT_CAPTION_TEMPLATE,
    overrides: dict[Triplet, str] | None = None,
) -> list[CaptionRecord]:
    """One caption per distinct triplet, ids assigned in sorted-triplet order."""
    overrides = overrides or {}
    records = []
    for i, triplet in enumerate(sorted(set(triplets))):
        text = overrides.get(triplet) or render_caption(triplet, template)
        records.append(
            CaptionRecord(
                caption_id=f"cap{i:06d}", triplet=triplet, text=text, embedding_row=i
            )
        )
    return records


@dataclass
class PendingQuery:
    """A query before weighting; weight is filled by compute_weights."""

    image_id: str
    field: str
    source_word: str
    target_word: str
    target_caption_id: str
    weight: float = 0.0


def attach_captions(
    enumerated: list[tuple[ImageRecord, str, str, Triplet]],
    caption_by_triplet: dict[Triplet, CaptionRecord],
) -> list[PendingQuery]:
    out = []
    for img, field_name, candidate, target in enumerated:
        out.append(
            PendingQuery(
                image_id=img.image_id,
                field=field_name,
                source_word=img.triplet.get(field_name),
                target_word=candidate,
                target_caption_id=caption_by_triplet[target].caption_id,
            )
        )
    return out


def oracle_filter(
    queries: list[PendingQuery],
    image_triplets: dict[str, Triplet],
    caption_by_triplet: dict[Triplet, CaptionRecord],
    oracle,
    cfg: BuildConfig,
) -> list[PendingQuery]:
    """Keep a query iff the oracle certifies the source caption and rejects
    the target caption on the source image (strict inequalities)."""
    missing = []
    kept = []
    for q in queries:
        source_caption = caption_by_triplet.get(image_triplets[q.image_id])
        if source_caption is None:
            missing.append((q.image_id, "<no caption for source triplet>"))
            continue
        try:
            p_source = oracle.score(q.image_id, source_caption.caption_id)
            p_target = oracle.score(q.image_id, q.target_caption_id)
        except CoverageError as exc:
            missing.extend(exc.missing or [(q.image_id, q.target_caption_id)])
            continue
        if p_source > cfg.oracle_hi and p_target < cfg.oracle_lo:
            kept.append(q)
    if missing:
        raise CoverageError(
            f"oracle cannot score {len(missing)} (image, caption) pair(s)", missing=missing
        )
    return kept


def compute_weights(queries: list[PendingQuery]) -> list[PendingQuery]:
    """Inverse-square-root weights per transformation group, normalized to 1.

    Group key is (field, source word, target word); each member gets raw
    weight 1/sqrt(group size) before global normalization.
    """
    if not queries:
        return []
    groups = Counter((q.field, q.source_word, q.target_word) for q in queries)
    raw = [1.0 / math.sqrt(groups[(q.field, q.source_word, q.target_word)]) for q in queries]
    total = math.fsum(raw)
    for q, r in zip(queries, raw):
        q.weight = r / total
    return queries


def split_images(image_ids: list[str], seed: int) -> dict[str, str]:
    """Seeded 50/50 dev/test assignment; dev gets the extra image when odd."""
    ordered = sorted(image_ids)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    n_dev = (len(ordered) + 1) // 2
    assignment = {}
    for rank, idx in enumerate(perm):
        assignment[ordered[idx]] = "dev" if rank < n_dev else "test"
    return assignment


def finalize_queries(queries: list[PendingQuery]) -> list[TransformationQuery]:
    """Assign stable ids in canonical (image, field, target) order."""
    ordered = sorted(queries, key=lambda q: (q.image_id, q.field, q.target_word))
    return [
        TransformationQuery(
            query_id=f"q{i:06d}",
            image_id=q.image_id,
            field=q.field,
            source_word=q.source_word,
            target_word=q.target_word,
            target_caption_id=q.target_caption_id,
            weight=q.weight,
        )
        for i, q in enumerate(ordered)
    ]


def read_scene_graph(path) -> list[SceneGraphEntry]:
    """Scene-graph TSV: image_id, subject, relation, object. One triplet per
    (cropped) image; duplicate image ids are rejected."""
    entries = []
    seen = set()
    for row in read_tsv(path, ["image_id", "subject", "relation", "object"]):
        if row["image_id"] in seen:
            raise ValidationError(f"{path}: duplicate image_id {row['image_id']}")
        seen.add(row["image_id"])
        entries.append(
            SceneGraphEntry(
                image_id=row["image_id"],
                triplet=Triplet(row["subject"], row["relation"], row["object"]),
            )
        )
    return entries


def read_allowlist(path) -> frozenset[str]:
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read allowlist {path}: {exc}") from exc
    return frozenset(line.strip() for line in text.splitlines() if line.strip())


def read_captions_override(path) -> dict[Triplet, str]:
    overrides = {}
    for row in read_tsv(path, ["subject", "relation", "object", "text"]):
        overrides[Triplet(row["subject"], row["relation"], row["object"])] = row["text"]
    return overrides


def build_dataset(
    entries: list[SceneGraphEntry],
    cfg: BuildConfig,
    oracle=None,
    captions_override: dict[Triplet, str] | None = None,
    embedding_dim: int = 32,
    embeddings_seed: int = 0,
) -> Dataset:
    """Run the full construction pipeline and assemble a loadable dataset.

    Stage order: allowlist filtering, object pruning, the min-images-per-
    triplet cut, caption rendering, query enumeration, optional oracle
    filtering, weighting, dev/test split. The emitted embeddings are
    placeholder compositional vectors (concept sums, like the synthetic
    worlds) so the bundle is retrievable out of the box; real encoder
    output replaces the .smat files without touching the metadata.
    """
    surviving = keep_min_image_triplets(filter_objects(filter_triplets(entries, cfg), cfg), cfg)
    if not surviving:
        raise GenerationError("no scene-graph entries survive filtering")

    split_assignment = split_images([e.image_id for e in surviving], cfg.split_seed)
    images = [
        ImageRecord(
            image_id=e.image_id,
            triplet=e.triplet,
            split=split_assignment[e.image_id],
            embedding_row=i,
        )
        for i, e in enumerate(sorted(surviving, key=lambda e: e.image_id))
    ]

    captions = make_captions([img.triplet for img in images], cfg.caption_template, captions_override)
    caption_by_triplet = {rec.triplet: rec for rec in captions}

    pending = attach_captions(build_queries(images), caption_by_triplet)
    if oracle is not None:
        pending = oracle_filter(
            pending, {img.image_id: img.triplet for img in images}, caption_by_triplet, oracle, cfg
        )
    queries = finalize_queries(compute_weights(pending))

    vocab = sorted(
        {t for img in images for t in (img.triplet.subject, img.triplet.relation, img.triplet.object)}
    )
    rng = np.random.default_rng(embeddings_seed)
    concepts = concept_vectors(vocab, embedding_dim, rng)

    def direction(triplet: Triplet) -> np.ndarray:
        total = concepts[triplet.subject] + concepts[triplet.relation] + concepts[triplet.object]
        return total / np.linalg.norm(total)

    image_matrix = EmbeddingMatrix(
        np.stack([direction(img.triplet) for img in images]).astype(np.float32), normalized=True
    )
    caption_matrix = EmbeddingMatrix(
        np.stack([direction(rec.triplet) for rec in captions]).astype(np.float32), normalized=True
    )
    word_matrix = EmbeddingMatrix(
        np.stack([concepts[w] for w in vocab]).astype(np.float32), normalized=True
    )
    return Dataset(
        images=images,
        image_embeddings=image_matrix,
        captions=captions,
        caption_embeddings=caption_matrix,
        words=vocab,
        word_embeddings=word_matrix,
        queries=queries,
    )
