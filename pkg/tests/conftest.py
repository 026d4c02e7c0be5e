import asyncio

import httpx
import numpy as np
import pytest

from simat.oracle import MockOracle
from simat.store import (
    CaptionRecord,
    Dataset,
    EmbeddingMatrix,
    ImageRecord,
    Triplet,
    TransformationQuery,
)
from simat.synth import SynthConfig, generate_world


def unit_rows(n, d, seed=0):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class SyncASGITransport(httpx.BaseTransport):
    """Drive an ASGI app from a synchronous httpx client."""

    def __init__(self, app):
        self._inner = httpx.ASGITransport(app=app)

    def handle_request(self, request):
        async def go():
            response = await self._inner.handle_async_request(request)
            body = await response.aread()
            return httpx.Response(
                response.status_code, headers=response.headers, content=body
            )

        return asyncio.run(go())


@pytest.fixture(scope="session")
def noiseless_world():
    """5x5x5 compositional world at sigma=0; every strategy is exact here."""
    cfg = SynthConfig(
        num_subjects=5,
        num_relations=5,
        num_objects=5,
        images_per_triplet=2,
        dim=32,
        noise_sigma=0.0,
        triplet_density=0.5,
        seed=7,
    )
    dataset, concepts = generate_world(cfg)
    return dataset, concepts


@pytest.fixture(scope="session")
def mock_oracle(noiseless_world):
    dataset, _ = noiseless_world
    return MockOracle.for_dataset(dataset)


def tiny_dataset():
    """Two images / two captions / one query, hand-checkable geometry."""
    t1 = Triplet("man", "riding", "horse")
    t2 = Triplet("man", "riding", "bike")
    images = [
        ImageRecord("img_a", t1, "dev", 0),
        ImageRecord("img_b", t2, "test", 1),
    ]
    captions = [
        CaptionRecord("cap_a", t1, "A man riding a horse", 0),
        CaptionRecord("cap_b", t2, "A man riding a bike", 1),
    ]
    image_matrix = EmbeddingMatrix(np.eye(2, 4, dtype=np.float32), normalized=True)
    caption_matrix = EmbeddingMatrix(np.eye(2, 4, k=1, dtype=np.float32), normalized=True)
    words = ["bike", "horse", "man", "riding"]
    word_matrix = EmbeddingMatrix(np.eye(4, dtype=np.float32), normalized=True)
    queries = [
        TransformationQuery("q0", "img_a", "object", "horse", "bike", "cap_b", 1.0)
    ]
    return Dataset(
        images=images,
        image_embeddings=image_matrix,
        captions=captions,
        caption_embeddings=caption_matrix,
        words=words,
        word_embeddings=word_matrix,
        queries=queries,
    )
