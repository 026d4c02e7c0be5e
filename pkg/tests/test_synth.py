import numpy as np
import pytest

from simat.errors import ConfigError, GenerationError
from simat.evaluation import simat_score
from simat.oracle import MockOracle
from simat.store import load_dataset
from simat.synth import SynthConfig, generate_world, write_world
from simat.transform import TransformConfig


def test_noiseless_world_is_exact(noiseless_world, mock_oracle):
    dataset, _ = noiseless_world
    for strategy in ("delta", "t2i", "i2t2i"):
        report = simat_score(
            dataset, mock_oracle, TransformConfig(lam=1.0, strategy=strategy, top_n=1)
        )
        assert report.score == 100.0


def test_2x1x2_world_counts():
    cfg = SynthConfig(
        num_subjects=2,
        num_relations=1,
        num_objects=2,
        images_per_triplet=2,
        dim=8,
        triplet_density=1.0,
        seed=0,
    )
    dataset, concepts = generate_world(cfg)
    assert len(dataset.images) == 8  # 4 triplets x 2 copies
    assert len(dataset.captions) == 4
    # per image: one subject swap + one object swap both realized -> 2 queries
    assert len(dataset.queries) == 16
    assert len(concepts) == 5


def test_concepts_orthonormal_when_dim_allows():
    cfg = SynthConfig(num_subjects=3, num_relations=2, num_objects=3, dim=16, seed=2)
    _, concepts = generate_world(cfg)
    basis = np.stack(list(concepts.values()))
    gram = basis @ basis.T
    np.testing.assert_allclose(gram, np.eye(len(concepts)), atol=1e-10)


def test_same_seed_byte_identical_bundle(tmp_path):
    cfg = SynthConfig(num_subjects=3, num_relations=2, num_objects=3, dim=16, seed=11)
    for name in ("a", "b"):
        dataset, concepts = generate_world(cfg)
        write_world(tmp_path / name, dataset, concepts)
    for child in sorted((tmp_path / "a").iterdir()):
        twin = tmp_path / "b" / child.name
        assert child.read_bytes() == twin.read_bytes(), child.name


def test_different_seed_differs(tmp_path):
    base = SynthConfig(num_subjects=3, num_relations=2, num_objects=3, dim=16, seed=1)
    other = SynthConfig(num_subjects=3, num_relations=2, num_objects=3, dim=16, seed=2)
    a, _ = generate_world(base)
    b, _ = generate_world(other)
    assert a.image_embeddings.data.tobytes() != b.image_embeddings.data.tobytes()


def test_generated_bundle_loads(tmp_path):
    cfg = SynthConfig(num_subjects=2, num_relations=2, num_objects=2, dim=8, seed=5)
    dataset, concepts = generate_world(cfg)
    write_world(tmp_path / "w", dataset, concepts)
    loaded = load_dataset(tmp_path / "w")
    assert len(loaded.queries) == len(dataset.queries)
    assert (tmp_path / "w" / "concepts.smat").exists()


def test_score_degrades_with_noise():
    def mean_score(sigma, seeds=range(10)):
        scores = []
        for seed in seeds:
            cfg = SynthConfig(
                num_subjects=3,
                num_relations=3,
                num_objects=3,
                dim=16,
                noise_sigma=sigma,
                seed=200 + seed,
            )
            dataset, _ = generate_world(cfg)
            oracle = MockOracle.for_dataset(dataset)
            scores.append(
                simat_score(dataset, oracle, TransformConfig(lam=1.0, top_n=1)).score
            )
        return float(np.mean(scores))

    assert mean_score(0.5) < mean_score(0.1)


def test_zero_query_config_rejected():
    cfg = SynthConfig(
        num_subjects=2, num_relations=1, num_objects=1, dim=8, triplet_density=0.25, seed=0
    )
    with pytest.raises(GenerationError):
        generate_world(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(num_subjects=1, num_relations=1, num_objects=1)
    with pytest.raises(ConfigError):
        SynthConfig(triplet_density=0.0)
    with pytest.raises(ConfigError):
        SynthConfig(noise_sigma=-0.1)
