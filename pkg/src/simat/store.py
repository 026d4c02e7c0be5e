"""On-disk formats and in-memory dataset assembly.

A dataset bundle is a directory of four TSV metadata files (images.tsv,
captions.tsv, queries.tsv, words.tsv) plus SMAT embedding files with .ids
sidecars. Everything is loaded eagerly, validated, and canonically sorted
so downstream reports are deterministic.

SMAT layout (little-endian): magic "SMAT", version u16 = 1, flags u16
(bit 0: rows are L2-normalized), rows u32, dim u32, then rows*dim float32
values row-major. The sidecar ``<stem>.ids`` holds one UTF-8 id per line,
line i matching row i.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, StorageError, ValidationError

MAGIC = b"SMAT"
VERSION = 1
FLAG_NORMALIZED = 0x1
_HEADER = struct.Struct("<4sHHII")

NORM_TOL = 1e-4

FIELDS = ("subject", "relation", "object")
SPLITS = ("dev", "test")

IMAGES_TSV_COLUMNS = ["image_id", "subject", "relation", "object", "split"]
CAPTIONS_TSV_COLUMNS = ["caption_id", "subject", "relation", "object", "text"]
QUERIES_TSV_COLUMNS = [
    "query_id",
    "image_id",
    "field",
    "source_word",
    "target_word",
    "target_caption_id",
    "weight",
]
WORDS_TSV_COLUMNS = ["word"]


def _check_token(value: str, what: str) -> str:
    if not value:
        raise ValidationError(f"{what} must be non-empty")
    if "\t" in value or "\n" in value or "\r" in value:
        raise ValidationError(f"{what} {value!r} contains tab/newline characters")
    return value


@dataclass(frozen=True, order=True)
class Triplet:
    """A (subject, relation, object) annotation; tokens lowercase."""

    subject: str
    relation: str
    object: str

    def __post_init__(self):
        for name in FIELDS:
            token = getattr(self, name)
            _check_token(token, name)
            if token != token.lower():
                raise ValidationError(f"{name} token {token!r} must be lowercase")

    def get(self, field_name: str) -> str:
        if field_name not in FIELDS:
            raise ArgumentError(f"unknown triplet field {field_name!r}")
        return getattr(self, field_name)

    def replace(self, field_name: str, token: str) -> "Triplet":
        if field_name not in FIELDS:
            raise ArgumentError(f"unknown triplet field {field_name!r}")
        parts = {name: getattr(self, name) for name in FIELDS}
        parts[field_name] = token
        return Triplet(**parts)


@dataclass(eq=False)
class EmbeddingMatrix:
    """Dense float32 row-major matrix, one row per item."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ArgumentError(f"embedding matrix must be 2-D, got shape {arr.shape}")
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.validate()
        self.data.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def validate(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise ArgumentError("embedding matrix contains non-finite values")
        if self.normalized and self.rows:
            norms = np.linalg.norm(self.data.astype(np.float64), axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
            if bad.size:
                raise ArgumentError(
                    f"normalized flag set but {bad.size} rows have non-unit norm "
                    f"(first offender: row {bad[0]}, norm {norms[bad[0]]:.6g})"
                )

    def row(self, i: int) -> np.ndarray:
        return self.data[i]


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    triplet: Triplet
    split: str
    embedding_row: int

    def __post_init__(self):
        _check_token(self.image_id, "image_id")
        if self.split not in SPLITS:
            raise ValidationError(
                f"image {self.image_id}: split must be one of {SPLITS}, got {self.split!r}"
            )


@dataclass(frozen=True)
class CaptionRecord:
    caption_id: str
    triplet: Triplet
    text: str
    embedding_row: int

    def __post_init__(self):
        _check_token(self.caption_id, "caption_id")
        if not self.text:
            raise ValidationError(f"caption {self.caption_id}: text must be non-empty")


@dataclass(frozen=True)
class TransformationQuery:
    query_id: str
    image_id: str
    field: str
    source_word: str
    target_word: str
    target_caption_id: str
    weight: float

    def __post_init__(self):
        _check_token(self.query_id, "query_id")
        if self.field not in FIELDS:
            raise ValidationError(
                f"query {self.query_id}: field must be one of {FIELDS}, got {self.field!r}"
            )
        if self.source_word == self.target_word:
            raise ValidationError(
                f"query {self.query_id}: source and target word are both {self.source_word!r}"
            )
        if self.weight < 0 or not np.isfinite(self.weight):
            raise ValidationError(f"query {self.query_id}: weight must be finite and >= 0")


@dataclass(eq=False)
class Dataset:
    """A fully cross-validated benchmark bundle held in memory.

    Records are canonically sorted by id and the image/caption matrices are
    realigned so row i corresponds to record i. Immutable after load, safe
    to share across concurrent readers.
    """

    images: list[ImageRecord]
    image_embeddings: EmbeddingMatrix
    captions: list[CaptionRecord]
    caption_embeddings: EmbeddingMatrix
    words: list[str]
    word_embeddings: EmbeddingMatrix
    queries: list[TransformationQuery]

    image_by_id: dict[str, ImageRecord] = field(init=False, repr=False)
    caption_by_id: dict[str, CaptionRecord] = field(init=False, repr=False)
    caption_by_triplet: dict[Triplet, CaptionRecord] = field(init=False, repr=False)
    word_row: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        problems: list[str] = []
        self.images, self.image_embeddings = _canonicalize(
            sorted(self.images, key=lambda r: r.image_id),
            self.image_embeddings,
            "image",
            lambda r: r.image_id,
            problems,
        )
        self.captions, self.caption_embeddings = _canonicalize(
            sorted(self.captions, key=lambda r: r.caption_id),
            self.caption_embeddings,
            "caption",
            lambda r: r.caption_id,
            problems,
        )
        self.queries = sorted(self.queries, key=lambda q: q.query_id)
        self.image_by_id = {r.image_id: r for r in self.images}
        self.caption_by_id = {r.caption_id: r for r in self.captions}
        self.caption_by_triplet = {}
        for rec in self.captions:
            if rec.triplet in self.caption_by_triplet:
                problems.append(
                    f"caption {rec.caption_id}: triplet already owned by "
                    f"{self.caption_by_triplet[rec.triplet].caption_id}"
                )
            else:
                self.caption_by_triplet[rec.triplet] = rec
        self.word_row = {}
        if len(self.words) != self.word_embeddings.rows:
            problems.append(
                f"words list has {len(self.words)} entries but the word matrix "
                f"has {self.word_embeddings.rows} rows"
            )
        else:
            for i, word in enumerate(self.words):
                if word in self.word_row:
                    problems.append(f"duplicate word {word}")
                else:
                    self.word_row[word] = i

        dims = {
            "images": self.image_embeddings.dim,
            "captions": self.caption_embeddings.dim,
            "words": self.word_embeddings.dim,
        }
        if len(set(dims.values())) > 1:
            problems.append(f"embedding dims disagree: {dims}")

        seen_queries: set[str] = set()
        for q in self.queries:
            if q.query_id in seen_queries:
                problems.append(f"duplicate query_id {q.query_id}")
                continue
            seen_queries.add(q.query_id)
            image = self.image_by_id.get(q.image_id)
            if image is None:
                problems.append(f"query {q.query_id}: unknown image {q.image_id}")
                continue
            target = self.caption_by_id.get(q.target_caption_id)
            if target is None:
                problems.append(
                    f"query {q.query_id}: unknown caption {q.target_caption_id}"
                )
                continue
            for w in (q.source_word, q.target_word):
                if w not in self.word_row:
                    problems.append(f"query {q.query_id}: no word embedding for {w!r}")
            if image.triplet.get(q.field) != q.source_word:
                problems.append(
                    f"query {q.query_id}: source word {q.source_word!r} does not match "
                    f"the image's {q.field} ({image.triplet.get(q.field)!r})"
                )
            expected = image.triplet.replace(q.field, q.target_word)
            if target.triplet != expected:
                problems.append(
                    f"query {q.query_id}: target caption triplet {target.triplet} "
                    f"!= expected {expected}"
                )
        if problems:
            raise ValidationError(
                f"dataset failed validation with {len(problems)} problem(s):\n  "
                + "\n  ".join(problems)
            )

    def image_vector(self, image_id: str) -> np.ndarray:
        return self.image_embeddings.row(self.image_by_id[image_id].embedding_row)

    @property
    def num_queries(self) -> int:
        return len(self.queries)

    def caption_vector(self, caption_id: str) -> np.ndarray:
        return self.caption_embeddings.row(self.caption_by_id[caption_id].embedding_row)

    def word_vector(self, word: str) -> np.ndarray:
        return self.word_embeddings.row(self.word_row[word])

    @property
    def image_ids(self) -> list[str]:
        return [rec.image_id for rec in self.images]

    def split_queries(self, split: str | None) -> list[TransformationQuery]:
        """Queries whose source image belongs to `split` (None = all)."""
        if split is None or split == "all":
            return list(self.queries)
        if split not in SPLITS:
            raise ArgumentError(f"split must be one of {SPLITS} or 'all', got {split!r}")
        return [q for q in self.queries if self.image_by_id[q.image_id].split == split]


def _canonicalize(records, matrix, what, key, problems):
    """Reorder `matrix` rows to match sorted `records`; rewrite row indices."""
    import dataclasses

    if len(records) != matrix.rows:
        problems.append(
            f"{what} matrix has {matrix.rows} rows but {len(records)} records are listed"
        )
        return records, matrix
    seen: set[str] = set()
    for rec in records:
        if key(rec) in seen:
            problems.append(f"duplicate {what}_id {key(rec)}")
            return records, matrix
        seen.add(key(rec))
        if not (0 <= rec.embedding_row < matrix.rows):
            problems.append(f"{what} {key(rec)}: embedding row out of range")
            return records, matrix
    rows = {rec.embedding_row for rec in records}
    if len(rows) != len(records):
        problems.append(f"{what} records share embedding rows")
        return records, matrix
    order = [rec.embedding_row for rec in records]
    if records and order != list(range(len(records))):
        matrix = EmbeddingMatrix(matrix.data[order], normalized=matrix.normalized)
    records = [
        dataclasses.replace(rec, embedding_row=i) for i, rec in enumerate(records)
    ]
    return records, matrix


def ids_path_for(path: Path) -> Path:
    return Path(path).with_suffix(".ids")


def write_embeddings(matrix: EmbeddingMatrix, ids: list[str], path: str | Path) -> None:
    """Write a SMAT file plus its .ids sidecar; round-trips bit-exactly."""
    path = Path(path)
    if len(ids) != matrix.rows:
        raise ArgumentError(
            f"got {len(ids)} ids for a matrix with {matrix.rows} rows"
        )
    for item in ids:
        _check_token(item, "id")
    matrix.validate()
    flags = FLAG_NORMALIZED if matrix.normalized else 0
    header = _HEADER.pack(MAGIC, VERSION, flags, matrix.rows, matrix.dim)
    payload = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    try:
        _atomic_write_bytes(path, header + payload)
        _atomic_write_bytes(
            ids_path_for(path), "".join(f"{i}\n" for i in ids).encode("utf-8")
        )
    except OSError as exc:
        raise StorageError(f"cannot write embeddings to {path}: {exc}") from exc


def read_embeddings(path: str | Path) -> tuple[EmbeddingMatrix, list[str]]:
    """Read a SMAT file and its sidecar, validating header and payload."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read embeddings from {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a SMAT header ({len(blob)} bytes)")
    magic, version, flags, rows, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = rows * dim * 4
    actual = len(blob) - _HEADER.size
    if actual != expected:
        raise FormatError(
            f"{path}: payload is {actual} bytes but header declares "
            f"{rows}x{dim} float32 = {expected} bytes"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(rows, dim)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: payload contains non-finite values")
    try:
        matrix = EmbeddingMatrix(data.copy(), normalized=bool(flags & FLAG_NORMALIZED))
    except ArgumentError as exc:
        raise FormatError(f"{path}: {exc}") from exc

    ids_file = ids_path_for(path)
    try:
        text = ids_file.read_text("utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read id sidecar {ids_file}: {exc}") from exc
    ids = text.splitlines()
    if len(ids) != rows:
        raise FormatError(
            f"{ids_file}: {len(ids)} ids for {rows} rows in {path.name}"
        )
    return matrix, ids


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def read_tsv(path: str | Path, columns: list[str]) -> list[dict[str, str]]:
    """Read a header-checked TSV into a list of row dicts."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter="\t")
            try:
                header = next(reader)
            except StopIteration:
                raise FormatError(f"{path}: missing header row") from None
            if header != columns:
                raise FormatError(
                    f"{path}: header {header} does not match expected {columns}"
                )
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(columns):
                    raise FormatError(
                        f"{path}:{lineno}: expected {len(columns)} columns, got {len(row)}"
                    )
                rows.append(dict(zip(columns, row)))
            return rows
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def write_tsv(path: str | Path, columns: list[str], rows: list[dict[str, str]]) -> None:
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(str(row[c]) for c in columns))
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_dataset(directory: str | Path) -> Dataset:
    """Load and validate a full bundle from `directory`."""
    directory = Path(directory)
    if not directory.is_dir():
        raise StorageError(f"dataset directory {directory} does not exist")

    image_matrix, image_ids = read_embeddings(directory / "images.smat")
    caption_matrix, caption_ids = read_embeddings(directory / "captions.smat")
    word_matrix, word_ids = read_embeddings(directory / "words.smat")

    image_row = _index_ids(image_ids, "images.smat")
    caption_row = _index_ids(caption_ids, "captions.smat")

    problems: list[str] = []
    images = []
    for row in read_tsv(directory / "images.tsv", IMAGES_TSV_COLUMNS):
        if row["image_id"] not in image_row:
            problems.append(f"images.tsv: no embedding row for {row['image_id']}")
            continue
        images.append(
            ImageRecord(
                image_id=row["image_id"],
                triplet=Triplet(row["subject"], row["relation"], row["object"]),
                split=row["split"],
                embedding_row=image_row[row["image_id"]],
            )
        )
    captions = []
    for row in read_tsv(directory / "captions.tsv", CAPTIONS_TSV_COLUMNS):
        if row["caption_id"] not in caption_row:
            problems.append(f"captions.tsv: no embedding row for {row['caption_id']}")
            continue
        captions.append(
            CaptionRecord(
                caption_id=row["caption_id"],
                triplet=Triplet(row["subject"], row["relation"], row["object"]),
                text=row["text"],
                embedding_row=caption_row[row["caption_id"]],
            )
        )
    words_tsv = [row["word"] for row in read_tsv(directory / "words.tsv", WORDS_TSV_COLUMNS)]
    if words_tsv != word_ids:
        problems.append(
            "words.tsv does not list the same words, in the same order, as words.smat"
        )
    queries = []
    for row in read_tsv(directory / "queries.tsv", QUERIES_TSV_COLUMNS):
        try:
            weight = float(row["weight"])
        except ValueError:
            problems.append(f"queries.tsv: bad weight for {row['query_id']}")
            continue
        queries.append(
            TransformationQuery(
                query_id=row["query_id"],
                image_id=row["image_id"],
                field=row["field"],
                source_word=row["source_word"],
                target_word=row["target_word"],
                target_caption_id=row["target_caption_id"],
                weight=weight,
            )
        )
    if problems:
        raise ValidationError(
            f"bundle {directory} failed validation with {len(problems)} problem(s):\n  "
            + "\n  ".join(problems)
        )
    return Dataset(
        images=images,
        image_embeddings=image_matrix,
        captions=captions,
        caption_embeddings=caption_matrix,
        words=words_tsv,
        word_embeddings=word_matrix,
        queries=queries,
    )


def _index_ids(ids: list[str], what: str) -> dict[str, int]:
    index: dict[str, int] = {}
    for i, item in enumerate(ids):
        if item in index:
            raise ValidationError(f"{what}: duplicate id {item}")
        index[item] = i
    return index


def write_bundle(directory: str | Path, dataset: Dataset) -> None:
    """Write a Dataset as a canonical on-disk bundle (sorted, diffable)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    write_embeddings(
        dataset.image_embeddings, [r.image_id for r in dataset.images], directory / "images.smat"
    )
    write_embeddings(
        dataset.caption_embeddings,
        [r.caption_id for r in dataset.captions],
        directory / "captions.smat",
    )
    write_embeddings(dataset.word_embeddings, dataset.words, directory / "words.smat")

    write_tsv(
        directory / "images.tsv",
        IMAGES_TSV_COLUMNS,
        [
            {
                "image_id": r.image_id,
                "subject": r.triplet.subject,
                "relation": r.triplet.relation,
                "object": r.triplet.object,
                "split": r.split,
            }
            for r in dataset.images
        ],
    )
    write_tsv(
        directory / "captions.tsv",
        CAPTIONS_TSV_COLUMNS,
        [
            {
                "caption_id": r.caption_id,
                "subject": r.triplet.subject,
                "relation": r.triplet.relation,
                "object": r.triplet.object,
                "text": r.text,
            }
            for r in dataset.captions
        ],
    )
    write_tsv(directory / "words.tsv", WORDS_TSV_COLUMNS, [{"word": w} for w in dataset.words])
    write_tsv(
        directory / "queries.tsv",
        QUERIES_TSV_COLUMNS,
        [
            {
                "query_id": q.query_id,
                "image_id": q.image_id,
                "field": q.field,
                "source_word": q.source_word,
                "target_word": q.target_word,
                "target_caption_id": q.target_caption_id,
                "weight": repr(q.weight),
            }
            for q in dataset.queries
        ],
    )
