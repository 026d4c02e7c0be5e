"""Benchmark scoring: weighted transformation accuracy and its variants.

The headline score is a weighted accuracy: a query succeeds when any of
the top-n retrieved images is accepted by the oracle for the target
caption (probability strictly above 0.5), and per-query weights are
renormalized over the evaluated subset so dev/test scores stay comparable.
Also here: the annotation-equality variant, the text-only delta accuracy,
the text->image upper bound, bidirectional recall@k, per-target
breakdowns, and lambda/temperature sweeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArgumentError, CoverageError, ValidationError
from .geometry import RankedHit, top_k
from .oracle import decide
from .store import Dataset, EmbeddingMatrix, TransformationQuery
from .train import AdaptationHead, apply_head
from .transform import TransformConfig, canonical_strategy, run_query, word_delta


@dataclass
class QueryOutcome:
    query_id: str
    retrieved: list[RankedHit]
    success: bool
    oracle_prob_best: float
    mu: float
    target_word: str
    field_name: str


@dataclass
class ScoreReport:
    score: float
    n: int
    lam: float
    strategy: str
    split: str
    per_target: dict[str, tuple[float, float]]
    num_queries: int
    outcomes: list[QueryOutcome] = field(default_factory=list)
    caption_leaking: bool = False

    def __post_init__(self):
        if not (0.0 <= self.score <= 100.0 + 1e-9):
            raise ValidationError(f"score {self.score} outside [0, 100]")
        if self.per_target:
            shares = math.fsum(share for _, share in self.per_target.values())
            if abs(shares - 1.0) > 1e-9:
                raise ValidationError(f"per-target weight shares sum to {shares}, not 1")


def renormalized_weights(queries: list[TransformationQuery]) -> list[float]:
    """Weights rescaled to sum to 1 over the evaluated subset."""
    total = math.fsum(q.weight for q in queries)
    if queries and total <= 0:
        raise ValidationError("query weights sum to zero; cannot renormalize")
    return [q.weight / total for q in queries]


def _weighted_accuracy(queries: list[TransformationQuery], successes: list[bool]) -> float:
    """100 * (weight of successes / total weight), exact at the endpoints.

    Computed as a ratio of the raw weights so an all-success evaluation is
    exactly 100.0 (same fsum in numerator and denominator).
    """
    if not queries:
        return 0.0
    total = math.fsum(q.weight for q in queries)
    if total <= 0:
        raise ValidationError("query weights sum to zero; cannot renormalize")
    hit = math.fsum(q.weight for q, ok in zip(queries, successes) if ok)
    return 100.0 * (hit / total)


def breakdown_by_target(outcomes: list[QueryOutcome]) -> dict[str, tuple[float, float]]:
    """Per target word: (weighted accuracy within group, share of total weight)."""
    if not outcomes:
        return {}
    groups: dict[str, list[QueryOutcome]] = {}
    for outcome in outcomes:
        groups.setdefault(outcome.target_word, []).append(outcome)
    table = {}
    for word in sorted(groups):
        members = groups[word]
        weight = math.fsum(m.mu for m in members)
        hit_weight = math.fsum(m.mu for m in members if m.success)
        table[word] = (100.0 * hit_weight / weight if weight else 0.0, weight)
    return table


def simat_score(
    dataset: Dataset,
    oracle,
    cfg: TransformConfig,
    split: str | None = None,
    runner=run_query,
) -> ScoreReport:
    """Weighted accuracy of transformation success over the chosen split.

    A query succeeds when any of its top-n retrieved images gets oracle
    probability > 0.5 for the target caption.
    """
    queries = dataset.split_queries(split)
    weights = renormalized_weights(queries)
    outcomes = []
    missing: list[tuple[str, str]] = []
    for query, mu in zip(queries, weights):
        hits = runner(dataset, query, cfg)
        probs = []
        for hit in hits:
            try:
                probs.append(oracle.score(hit.item_id, query.target_caption_id))
            except CoverageError as exc:
                missing.extend(exc.missing or [(hit.item_id, query.target_caption_id)])
        if missing:
            continue  # keep walking to report every gap at once
        success = any(decide(p) for p in probs)
        outcomes.append(
            QueryOutcome(
                query_id=query.query_id,
                retrieved=hits,
                success=success,
                oracle_prob_best=max(probs) if probs else 0.0,
                mu=mu,
                target_word=query.target_word,
                field_name=query.field,
            )
        )
    if missing:
        raise CoverageError(
            f"oracle cannot score {len(missing)} (image, caption) pair(s)", missing=missing
        )
    return ScoreReport(
        score=_weighted_accuracy(queries, [o.success for o in outcomes]),
        n=cfg.top_n,
        lam=cfg.lam,
        strategy=cfg.strategy,
        split=split or "all",
        per_target=breakdown_by_target(outcomes),
        num_queries=len(queries),
        outcomes=outcomes,
        caption_leaking=cfg.caption_leaking,
    )


@dataclass
class AnnotationMatchReport:
    """Annotation-equality scoring: top-1 image triplet must equal the target."""

    weighted_score: float
    unweighted_score: float
    n: int
    lam: float
    strategy: str
    split: str
    num_queries: int
    outcomes: list[QueryOutcome] = field(default_factory=list)


def annotation_match_score(
    dataset: Dataset,
    cfg: TransformConfig,
    split: str | None = None,
    runner=run_query,
) -> AnnotationMatchReport:
    """Success iff the top-1 image's annotated triplet equals the target triplet.

    Stricter than the oracle score: a visually correct image annotated with
    a synonymous triplet counts as a failure.
    """
    queries = dataset.split_queries(split)
    weights = renormalized_weights(queries)
    outcomes = []
    hits_count = 0
    for query, mu in zip(queries, weights):
        hits = runner(dataset, query, cfg)
        target_triplet = dataset.caption_by_id[query.target_caption_id].triplet
        top1 = dataset.image_by_id[hits[0].item_id].triplet if hits else None
        success = top1 == target_triplet
        if success:
            hits_count += 1
        outcomes.append(
            QueryOutcome(
                query_id=query.query_id,
                retrieved=hits,
                success=success,
                oracle_prob_best=1.0 if success else 0.0,
                mu=mu,
                target_word=query.target_word,
                field_name=query.field,
            )
        )
    return AnnotationMatchReport(
        weighted_score=_weighted_accuracy(queries, [o.success for o in outcomes]),
        unweighted_score=100.0 * hits_count / len(queries) if queries else 0.0,
        n=cfg.top_n,
        lam=cfg.lam,
        strategy=cfg.strategy,
        split=split or "all",
        num_queries=len(queries),
        outcomes=outcomes,
    )


def text_delta_accuracy(
    dataset: Dataset, split: str | None = None
) -> float:
    """Weighted accuracy of delta arithmetic in pure text space.

    For each query: source caption embedding plus the word delta must land
    nearest (cosine, over all captions, source not excluded) to the target
    caption.
    """
    queries = dataset.split_queries(split)
    if not queries:
        return 0.0
    missing = []
    for q in queries:
        if dataset.image_by_id[q.image_id].triplet not in dataset.caption_by_triplet:
            missing.append((q.image_id, "<source caption>"))
    if missing:
        raise CoverageError(
            f"{len(missing)} query source triplets have no caption", missing=missing
        )
    caption_ids = [rec.caption_id for rec in dataset.captions]
    successes = []
    for query in queries:
        source = dataset.caption_by_triplet[dataset.image_by_id[query.image_id].triplet]
        delta = word_delta(
            dataset.word_embeddings, dataset.word_row, query.source_word, query.target_word
        )
        x = dataset.caption_embeddings.row(source.embedding_row).astype(np.float64) + delta.vector
        hits = top_k(x, dataset.caption_embeddings, caption_ids, k=1)
        successes.append(hits[0].item_id == query.target_caption_id)
    return _weighted_accuracy(queries, successes)


def retrieval_upper_bound(
    dataset: Dataset,
    oracle,
    cfg: TransformConfig,
    split: str | None = None,
    runner=run_query,
) -> ScoreReport:
    """Score when the target caption itself is the retrieval query."""
    return simat_score(dataset, oracle, replace(cfg, strategy="text_to_image"), split, runner)


def recall_at_k(
    image_embeddings: EmbeddingMatrix,
    text_embeddings: EmbeddingMatrix,
    pairs: list[tuple[int, int]],
    k: int,
) -> tuple[float, float]:
    """(text R@k, image R@k) percentages for a bijective pairing.

    text R@k ranks texts for each image query; image R@k ranks images for
    each text query. A pair counts when strictly-better competitors number
    fewer than k.
    """
    if k < 1:
        raise ArgumentError("k must be >= 1")
    if not pairs:
        raise ArgumentError("need at least one ground-truth pair")
    img_rows = [p[0] for p in pairs]
    txt_rows = [p[1] for p in pairs]
    if sorted(img_rows) != list(range(image_embeddings.rows)) or sorted(txt_rows) != list(
        range(text_embeddings.rows)
    ):
        raise ArgumentError("pairs must form a bijection over both matrices")

    def unit(matrix: EmbeddingMatrix) -> np.ndarray:
        data = matrix.data.astype(np.float64)
        norms = np.linalg.norm(data, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ArgumentError("recall is undefined for zero rows")
        return data / norms

    sims = unit(image_embeddings) @ unit(text_embeddings).T
    text_hits = 0
    image_hits = 0
    for i, j in pairs:
        text_hits += int(np.sum(sims[i] > sims[i, j]) < k)
        image_hits += int(np.sum(sims[:, j] > sims[i, j]) < k)
    return 100.0 * text_hits / len(pairs), 100.0 * image_hits / len(pairs)


def project_dataset(
    dataset: Dataset, image_head: AdaptationHead, text_head: AdaptationHead
) -> Dataset:
    """Re-embed a bundle through trained heads (captions and words share the
    text head)."""
    return Dataset(
        images=list(dataset.images),
        image_embeddings=apply_head(image_head, dataset.image_embeddings.data),
        captions=list(dataset.captions),
        caption_embeddings=apply_head(text_head, dataset.caption_embeddings.data),
        words=list(dataset.words),
        word_embeddings=apply_head(text_head, dataset.word_embeddings.data),
        queries=list(dataset.queries),
    )


@dataclass
class SweepCell:
    tau: str
    lam: float
    strategy: str
    n: int
    split: str
    score: float


@dataclass
class SweepSummary:
    tau: str
    strategy: str
    n: int
    split: str
    lambda_star: float
    score: float


def sweep(
    dataset: Dataset,
    oracle,
    lambdas: list[float],
    strategies: list[str],
    heads: dict[str, tuple[AdaptationHead, AdaptationHead] | None],
    base_cfg: TransformConfig,
    split: str | None = "dev",
) -> tuple[list[SweepCell], list[SweepSummary]]:
    """Cross-product evaluation over lambda, strategy, and head checkpoints.

    `heads` maps a temperature label to an (image head, text head) pair, or
    None for the raw embeddings. Returns all cells plus, per curve, the
    smallest lambda attaining the maximum score.
    """
    if not lambdas or not strategies or not heads:
        raise ArgumentError("sweep grids must be non-empty")
    lambdas = sorted(lambdas)
    cells = []
    summaries = []
    for tau_label in sorted(heads):
        pair = heads[tau_label]
        projected = project_dataset(dataset, *pair) if pair else dataset
        for strategy in strategies:
            best: tuple[float, float] | None = None  # (score, lambda); ties keep smaller lambda
            for lam in lambdas:
                cfg = replace(base_cfg, strategy=strategy, lam=lam)
                report = simat_score(projected, oracle, cfg, split)
                cells.append(
                    SweepCell(
                        tau=tau_label,
                        lam=lam,
                        strategy=cfg.strategy,
                        n=cfg.top_n,
                        split=report.split,
                        score=report.score,
                    )
                )
                if best is None or report.score > best[0]:
                    best = (report.score, lam)
            summaries.append(
                SweepSummary(
                    tau=tau_label,
                    strategy=canonical_strategy(strategy),
                    n=base_cfg.top_n,
                    split=split or "all",
                    lambda_star=best[1],
                    score=best[0],
                )
            )
    return cells, summaries
