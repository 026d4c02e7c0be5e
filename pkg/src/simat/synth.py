"""Synthetic compositional worlds with provable retrieval behavior.

Every vocabulary token gets a concept vector (orthonormal when dim allows),
a caption embeds as the normalized sum of its three concepts, a word embeds
as its concept, and an image embeds as the caption direction plus optional
gaussian noise. At zero noise, delta arithmetic lands exactly on the target
triplet's direction, so end-to-end retrieval scores are provably 100 and
noise sweeps have a real optimum to find.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GenerationError
from .geometry import concept_vectors
from .pipeline import (
    attach_captions,
    build_queries,
    compute_weights,
    finalize_queries,
    make_captions,
    split_images,
)
from .store import Dataset, EmbeddingMatrix, ImageRecord, Triplet


@dataclass
class SynthConfig:
    num_subjects: int = 4
    num_relations: int = 4
    num_objects: int = 4
    images_per_triplet: int = 2
    dim: int = 32
    noise_sigma: float = 0.0
    triplet_density: float = 1.0
    seed: int = 0

    def __post_init__(self):
        counts = (self.num_subjects, self.num_relations, self.num_objects)
        if min(counts) < 1:
            raise ConfigError("every axis needs at least one token")
        if max(counts) < 2:
            raise ConfigError(
                "at least one of subjects/relations/objects must have >= 2 tokens, "
                "otherwise no transformation query exists"
            )
        if self.images_per_triplet < 1:
            raise ConfigError("images_per_triplet must be >= 1")
        if self.dim < 2:
            raise ConfigError("dim must be >= 2")
        if not (0.0 < self.triplet_density <= 1.0):
            raise ConfigError("triplet_density must be in (0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @property
    def vocab(self) -> list[str]:
        return (
            [f"subj{i:02d}" for i in range(self.num_subjects)]
            + [f"rel{i:02d}" for i in range(self.num_relations)]
            + [f"obj{i:02d}" for i in range(self.num_objects)]
        )


def generate_world(cfg: SynthConfig) -> tuple[Dataset, dict[str, np.ndarray]]:
    """Build a full in-memory dataset plus the ground-truth concept vectors."""
    rng = np.random.default_rng(cfg.seed)
    concepts = concept_vectors(cfg.vocab, cfg.dim, rng)

    subjects = [f"subj{i:02d}" for i in range(cfg.num_subjects)]
    relations = [f"rel{i:02d}" for i in range(cfg.num_relations)]
    objects = [f"obj{i:02d}" for i in range(cfg.num_objects)]
    cube = [
        Triplet(s, r, o) for s in subjects for r in relations for o in objects
    ]
    n_realized = max(1, round(cfg.triplet_density * len(cube)))
    chosen = rng.choice(len(cube), size=n_realized, replace=False)
    realized = sorted(cube[i] for i in chosen)

    def direction(triplet: Triplet) -> np.ndarray:
        total = concepts[triplet.subject] + concepts[triplet.relation] + concepts[triplet.object]
        return total / np.linalg.norm(total)

    split_seed = int(rng.integers(0, 2**31 - 1))
    image_rows = []
    images = []
    for t_index, triplet in enumerate(realized):
        for copy in range(cfg.images_per_triplet):
            vec = direction(triplet)
            if cfg.noise_sigma > 0:
                vec = vec + cfg.noise_sigma * rng.normal(size=cfg.dim)
                vec = vec / np.linalg.norm(vec)
            image_rows.append(vec)
            images.append((f"img{t_index:04d}x{copy:02d}", triplet))

    assignment = split_images([image_id for image_id, _ in images], seed=split_seed)
    image_records = [
        ImageRecord(image_id=image_id, triplet=triplet, split=assignment[image_id], embedding_row=i)
        for i, (image_id, triplet) in enumerate(images)
    ]

    captions = make_captions(realized)
    caption_rows = np.stack([direction(rec.triplet) for rec in captions])
    words = sorted(concepts)
    word_rows = np.stack([concepts[w] for w in words])

    enumerated = build_queries(image_records)
    if not enumerated:
        raise GenerationError(
            "config realizes no transformation query; increase density or axis sizes"
        )
    caption_by_triplet = {rec.triplet: rec for rec in captions}
    pending = compute_weights(attach_captions(enumerated, caption_by_triplet))
    queries = finalize_queries(pending)

    dataset = Dataset(
        images=image_records,
        image_embeddings=EmbeddingMatrix(
            np.stack(image_rows).astype(np.float32), normalized=True
        ),
        captions=captions,
        caption_embeddings=EmbeddingMatrix(caption_rows.astype(np.float32), normalized=True),
        words=words,
        word_embeddings=EmbeddingMatrix(word_rows.astype(np.float32), normalized=True),
        queries=queries,
    )
    return dataset, concepts


def write_world(directory, dataset: Dataset, concepts: dict[str, np.ndarray]) -> None:
    """Write the bundle plus the ground-truth concept vectors for debugging."""
    from pathlib import Path

    from .store import write_bundle, write_embeddings

    directory = Path(directory)
    write_bundle(directory, dataset)
    tokens = sorted(concepts)
    write_embeddings(
        EmbeddingMatrix(
            np.stack([concepts[t] for t in tokens]).astype(np.float32), normalized=True
        ),
        tokens,
        directory / "concepts.smat",
    )
