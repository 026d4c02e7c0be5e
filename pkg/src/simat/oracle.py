"""Scoring backends for the image/caption matching probability.

Three interchangeable implementations answer "how likely does this caption
describe this image": a table of precomputed scores, a mock that compares
ground-truth annotations (1.0 on triplet match, else 0.0), and an HTTP
client for a remote scoring service. The remote client retries with
exponential backoff and caches every answer to a local table file so a
benchmark run can be replayed offline.
"""

from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import httpx

from .errors import CoverageError, TransportError, ValidationError
from .store import Dataset, Triplet, _atomic_write_text

ORACLE_TSV_COLUMNS = ["image_id", "caption_id", "probability"]


def decide(probability: float, threshold: float = 0.5) -> bool:
    """Success iff probability strictly exceeds the threshold."""
    return probability > threshold


class TableOracle:
    """Pure lookup into a {(image_id, caption_id): probability} table."""

    def __init__(self, scores: dict[tuple[str, str], float]):
        for (image_id, caption_id), p in scores.items():
            if not (0.0 <= p <= 1.0):
                raise ValidationError(
                    f"oracle score for ({image_id}, {caption_id}) is {p}, outside [0, 1]"
                )
        self.scores = dict(scores)

    def score(self, image_id: str, caption_id: str) -> float:
        try:
            return self.scores[(image_id, caption_id)]
        except KeyError:
            raise CoverageError(
                f"no oracle score for ({image_id}, {caption_id})",
                missing=[(image_id, caption_id)],
            ) from None

    def score_many(self, pairs: list[tuple[str, str]]) -> list[float]:
        missing = [p for p in pairs if p not in self.scores]
        if missing:
            raise CoverageError(
                f"no oracle score for {len(missing)} pair(s)", missing=missing
            )
        return [self.scores[p] for p in pairs]


class MockOracle:
    """Annotation-equality oracle: 1.0 iff the image's ground-truth triplet
    equals the caption's triplet, else 0.0."""

    def __init__(self, image_triplets: dict[str, Triplet], caption_triplets: dict[str, Triplet]):
        self.image_triplets = image_triplets
        self.caption_triplets = caption_triplets

    @classmethod
    def for_dataset(cls, dataset: Dataset) -> "MockOracle":
        return cls(
            {r.image_id: r.triplet for r in dataset.images},
            {r.caption_id: r.triplet for r in dataset.captions},
        )

    def score(self, image_id: str, caption_id: str) -> float:
        try:
            image_triplet = self.image_triplets[image_id]
            caption_triplet = self.caption_triplets[caption_id]
        except KeyError as exc:
            raise CoverageError(
                f"mock oracle has no annotation for {exc.args[0]!r}",
                missing=[(image_id, caption_id)],
            ) from None
        return 1.0 if image_triplet == caption_triplet else 0.0

    def score_many(self, pairs: list[tuple[str, str]]) -> list[float]:
        return [self.score(i, c) for i, c in pairs]


class RemoteOracle:
    """HTTP client for a POST /score service.

    Sends {"image_id", "caption"} (caption text, not id) and expects
    {"probability": p}. Three attempts with exponential backoff starting at
    200 ms; responses are cached in memory and appended to `cache_path` (an
    oracle.tsv) so reruns never re-contact the service.
    """

    def __init__(
        self,
        url: str,
        caption_texts: dict[str, str],
        cache_path: str | Path | None = None,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.2,
        max_inflight: int = 8,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url.rstrip("/")
        self.caption_texts = caption_texts
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.cache_path = Path(cache_path) if cache_path else None
        self.max_inflight = max_inflight
        self._cache: dict[tuple[str, str], float] = {}
        self._cache_lock = threading.Lock()
        self._inflight = threading.Semaphore(max_inflight)
        self._client = httpx.Client(timeout=timeout, transport=transport)
        if self.cache_path and self.cache_path.exists():
            self._cache.update(read_oracle_tsv(self.cache_path))

    def close(self) -> None:
        self._client.close()

    def score(self, image_id: str, caption_id: str) -> float:
        with self._cache_lock:
            if (image_id, caption_id) in self._cache:
                return self._cache[(image_id, caption_id)]
        caption = self.caption_texts.get(caption_id)
        if caption is None:
            raise CoverageError(
                f"no caption text for {caption_id!r}", missing=[(image_id, caption_id)]
            )
        probability = self._post_with_retries(image_id, caption_id, caption)
        if not (0.0 <= probability <= 1.0):
            raise ValidationError(
                f"remote oracle returned {probability} for ({image_id}, {caption_id})"
            )
        with self._cache_lock:
            self._cache[(image_id, caption_id)] = probability
            if self.cache_path:
                if not self.cache_path.exists():
                    self.cache_path.write_text(
                        "\t".join(ORACLE_TSV_COLUMNS) + "\n", encoding="utf-8"
                    )
                with open(self.cache_path, "a", encoding="utf-8") as fh:
                    fh.write(f"{image_id}\t{caption_id}\t{probability!r}\n")
        return probability

    def score_many(self, pairs: list[tuple[str, str]]) -> list[float]:
        """Score pairs concurrently (bounded pool); results in input order."""
        with ThreadPoolExecutor(max_workers=self.max_inflight) as pool:
            return list(pool.map(lambda p: self.score(*p), pairs))

    def _post_with_retries(self, image_id: str, caption_id: str, caption: str) -> float:
        delay = self.backoff
        last_error: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                time.sleep(delay)
                delay *= 2
            with self._inflight:
                try:
                    response = self._client.post(
                        f"{self.url}/score",
                        json={"image_id": image_id, "caption": caption},
                    )
                except httpx.HTTPError as exc:
                    last_error = exc
                    continue
            if response.status_code >= 500:
                last_error = TransportError(
                    f"oracle service returned {response.status_code}"
                )
                continue
            if response.status_code != 200:
                raise TransportError(
                    f"oracle service rejected ({image_id}, {caption_id}): "
                    f"HTTP {response.status_code}"
                )
            try:
                return float(response.json()["probability"])
            except (KeyError, ValueError, TypeError) as exc:
                raise TransportError(f"malformed oracle response: {exc}") from exc
        raise TransportError(
            f"oracle service unreachable after {self.retries} attempts "
            f"for ({image_id}, {caption_id}): {last_error}"
        )


def read_oracle_tsv(path: str | Path) -> dict[tuple[str, str], float]:
    """Load an oracle score table, validating the [0, 1] range."""
    from .store import read_tsv

    scores: dict[tuple[str, str], float] = {}
    for row in read_tsv(path, ORACLE_TSV_COLUMNS):
        try:
            p = float(row["probability"])
        except ValueError:
            raise ValidationError(
                f"{path}: bad probability {row['probability']!r} for "
                f"({row['image_id']}, {row['caption_id']})"
            ) from None
        if not (0.0 <= p <= 1.0):
            raise ValidationError(
                f"{path}: probability {p} for ({row['image_id']}, {row['caption_id']}) "
                "is outside [0, 1]"
            )
        key = (row["image_id"], row["caption_id"])
        if key in scores:
            raise ValidationError(f"{path}: duplicate score for {key}")
        scores[key] = p
    return scores


def write_oracle_tsv(path: str | Path, scores: dict[tuple[str, str], float]) -> None:
    lines = ["\t".join(ORACLE_TSV_COLUMNS)]
    for (image_id, caption_id), p in sorted(scores.items()):
        lines.append(f"{image_id}\t{caption_id}\t{p!r}")
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_table_oracle(path: str | Path) -> TableOracle:
    return TableOracle(read_oracle_tsv(path))
