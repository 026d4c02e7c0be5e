"""Request/response schemas for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class ScoreRequest(BaseModel):
    image_id: str
    caption: str


class ScoreResponse(BaseModel):
    probability: float


class DatasetSummary(BaseModel):
    name: str
    path: str
    num_images: int
    num_captions: int
    num_words: int
    num_queries: int
    dim: int


class LoadDatasetRequest(BaseModel):
    name: str
    data_dir: str


class OracleSpec(BaseModel):
    """Which scoring backend to use: mock, table:<path>, remote, or none."""

    kind: str = "mock"
    table_path: str | None = None
    url: str | None = None
    cache_path: str | None = None


class SynthRequest(BaseModel):
    out_dir: str
    subjects: int = 4
    relations: int = 4
    objects: int = 4
    images_per_triplet: int = 2
    dim: int = 32
    sigma: float = 0.0
    density: float = 1.0
    seed: int = 0


class BundleResponse(BaseModel):
    out_dir: str
    num_images: int
    num_captions: int
    num_queries: int
    dim: int


class BuildRequest(BaseModel):
    scene_graph: str
    subject_allowlist: str
    relation_allowlist: str
    out_dir: str
    oracle: OracleSpec = Field(default_factory=lambda: OracleSpec(kind="none"))
    oracle_hi: float = 0.9
    oracle_lo: float = 0.1
    max_objects: int = 10
    min_images: int = 2
    seed: int = 0
    template: str = "A {subject} {relation} a {object}"
    captions_override: str | None = None
    embeddings_seed: int = 0
    embedding_dim: int = 32


class TransformRequest(BaseModel):
    data_dir: str
    query_id: str | None = None
    image_id: str | None = None
    field: str | None = None
    target_word: str | None = None
    lam: float = 1.0
    strategy: str = "delta"
    topn: int = 5
    exclude_self: bool = True
    delta_method: str = "single_word"
    normalize_delta: bool = False


class HitModel(BaseModel):
    item_id: str
    similarity: float
    triplet: list[str]


class TransformResponse(BaseModel):
    query_id: str | None
    image_id: str
    field: str
    source_word: str
    target_word: str
    target_caption: str
    hits: list[HitModel]


class EvalRequest(BaseModel):
    data_dir: str
    strategy: str = "delta"
    lam: float = 1.0
    topn: int = 1
    split: str = "all"
    oracle: OracleSpec = Field(default_factory=OracleSpec)
    delta_method: str = "single_word"
    normalize_delta: bool = False
    exclude_self: bool = True
    breakdown: bool = False
    annotation_match: bool = False
    text_delta: bool = False
    out_dir: str | None = None


class PerTarget(BaseModel):
    score: float
    weight_share: float


class EvalResponse(BaseModel):
    score: float
    n: int
    lam: float
    strategy: str
    split: str
    num_queries: int
    caption_leaking: bool = False
    unweighted_score: float | None = None
    per_target: dict[str, PerTarget] | None = None
    report_files: list[str] = Field(default_factory=list)


class SweepRequest(BaseModel):
    data_dir: str
    lambdas: list[float]
    strategies: list[str] = Field(default_factory=lambda: ["delta"])
    heads: dict[str, str] = Field(default_factory=dict)  # tau label -> checkpoint dir
    topn: int = 1
    split: str = "dev"
    oracle: OracleSpec = Field(default_factory=OracleSpec)
    delta_method: str = "single_word"
    out_dir: str | None = None


class SweepCellModel(BaseModel):
    tau: str
    lam: float
    strategy: str
    n: int
    split: str
    score: float


class SweepSummaryModel(BaseModel):
    tau: str
    strategy: str
    n: int
    split: str
    lambda_star: float
    score: float


class SweepResponse(BaseModel):
    cells: list[SweepCellModel]
    summaries: list[SweepSummaryModel]
    report_files: list[str] = Field(default_factory=list)


class TrainRequest(BaseModel):
    image_features: str
    text_features: str
    out_dir: str
    tau: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    optimizer: str = "adam"
    head_kind: str = "linear"
    output_dim: int = 512
    hidden_dim: int | None = None
    loss_form: str = "infonce"


class TrainResponse(BaseModel):
    image_head: str
    text_head: str
    loss_history: list[float]
    final_loss: float


class GradCheckRequest(BaseModel):
    batch: int = 8
    dim: int = 16
    tau: float = 0.1
    eps: float = 1e-5
    seed: int = 0
    loss_form: str = "infonce"


class GradCheckResponse(BaseModel):
    max_rel_error: float
    passed: bool
    threshold: float


class ErrorBody(BaseModel):
    kind: str
    message: str
    exit_code: int
    missing: list[tuple[str, str]] | None = None
