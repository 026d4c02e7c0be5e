"""FastAPI service wrapping the engine.

The service owns all filesystem side effects (bundle writing, reports,
checkpoints); clients, including the bundled CLI, talk to it through the
typed request/response models. A dataset registry caches bundles loaded by
name; path-based requests always re-read from disk.

POST /score implements the oracle wire protocol (image_id + caption text
in, probability out), so a server started over a bundle plus a score table
doubles as a scoring service for remote-oracle clients.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import ConfigError, SimatError, TokenLookupError, UsageError
from ..evaluation import annotation_match_score, simat_score, sweep, text_delta_accuracy
from ..oracle import MockOracle, RemoteOracle, load_table_oracle
from ..pipeline import (
    BuildConfig,
    build_dataset,
    read_allowlist,
    read_captions_override,
    read_scene_graph,
)
from ..reports import (
    annotation_report_json,
    build_manifest,
    score_report_json,
    write_breakdown_csv,
    write_eval_csv,
    write_json,
    write_manifest,
    write_sweep_csv,
    write_sweep_summary_csv,
)
from ..store import Dataset, load_dataset, write_bundle
from ..svgplot import write_sweep_svg
from ..synth import SynthConfig, generate_world, write_world
from ..train import (
    TrainConfig,
    grad_check,
    infonce_grad,
    load_head,
    read_embeddings_for_training,
    save_head,
    train_heads,
    write_loss_history,
)
from ..transform import TransformConfig, run_query
from . import models

_STATUS_BY_KIND = {
    "argument": 400,
    "config": 400,
    "usage": 400,
    "lookup": 404,
    "format": 409,
    "validation": 409,
    "coverage": 409,
    "io": 409,
    "transport": 502,
    "empty_result": 409,
    "generation": 409,
    "numeric": 500,
    "training": 500,
}


def create_app(
    bundle_dir: str | None = None, oracle_spec: models.OracleSpec | None = None
) -> FastAPI:
    app = FastAPI(title="simat", version=__version__)
    app.state.datasets = {}
    app.state.score_oracle = None
    app.state.score_captions = {}

    if bundle_dir:
        dataset = load_dataset(bundle_dir)
        app.state.datasets["default"] = (str(Path(bundle_dir).resolve()), dataset)
        app.state.score_captions = {rec.text: rec.caption_id for rec in dataset.captions}
        app.state.score_oracle = _make_oracle(oracle_spec or models.OracleSpec(), dataset)

    @app.exception_handler(SimatError)
    async def _simat_error(request: Request, exc: SimatError):
        body = models.ErrorBody(
            kind=exc.kind,
            message=str(exc),
            exit_code=exc.exit_code,
            missing=getattr(exc, "missing", None) or None,
        )
        return JSONResponse(
            status_code=_STATUS_BY_KIND.get(exc.kind, 500),
            content={"error": body.model_dump()},
        )

    @app.get("/health", response_model=models.HealthResponse)
    def health():
        return models.HealthResponse(status="ok", version=__version__)

    @app.post("/score", response_model=models.ScoreResponse)
    def score(req: models.ScoreRequest):
        if app.state.score_oracle is None:
            raise ConfigError("server was started without a scoring bundle")
        caption_id = app.state.score_captions.get(req.caption)
        if caption_id is None:
            raise TokenLookupError(f"unknown caption text {req.caption!r}")
        return models.ScoreResponse(
            probability=app.state.score_oracle.score(req.image_id, caption_id)
        )

    @app.post("/datasets/load", response_model=models.DatasetSummary)
    def datasets_load(req: models.LoadDatasetRequest):
        dataset = load_dataset(req.data_dir)
        path = str(Path(req.data_dir).resolve())
        app.state.datasets[req.name] = (path, dataset)
        return _summary(req.name, path, dataset)

    @app.get("/datasets", response_model=list[models.DatasetSummary])
    def datasets_list():
        return [
            _summary(name, path, dataset)
            for name, (path, dataset) in sorted(app.state.datasets.items())
        ]

    @app.post("/synth", response_model=models.BundleResponse)
    def synth(req: models.SynthRequest):
        cfg = SynthConfig(
            num_subjects=req.subjects,
            num_relations=req.relations,
            num_objects=req.objects,
            images_per_triplet=req.images_per_triplet,
            dim=req.dim,
            noise_sigma=req.sigma,
            triplet_density=req.density,
            seed=req.seed,
        )
        dataset, concepts = generate_world(cfg)
        out = Path(req.out_dir)
        write_world(out, dataset, concepts)
        write_manifest(out, build_manifest("synth", req.model_dump(), [], seed=req.seed))
        return _bundle_response(out, dataset)

    @app.post("/build", response_model=models.BundleResponse)
    def build(req: models.BuildRequest):
        for path in (req.scene_graph, req.subject_allowlist, req.relation_allowlist):
            if not Path(path).is_file():
                raise UsageError(f"input file {path} does not exist")
        cfg = BuildConfig(
            subject_allowlist=read_allowlist(req.subject_allowlist),
            relation_allowlist=read_allowlist(req.relation_allowlist),
            max_objects_per_pair=req.max_objects,
            min_images_per_triplet=req.min_images,
            oracle_hi=req.oracle_hi,
            oracle_lo=req.oracle_lo,
            split_seed=req.seed,
            caption_template=req.template,
        )
        entries = read_scene_graph(req.scene_graph)
        overrides = (
            read_captions_override(req.captions_override) if req.captions_override else None
        )
        oracle = None
        if req.oracle.kind != "none":
            oracle = _make_oracle(req.oracle, None)
        dataset = build_dataset(
            entries,
            cfg,
            oracle=oracle,
            captions_override=overrides,
            embedding_dim=req.embedding_dim,
            embeddings_seed=req.embeddings_seed,
        )
        out = Path(req.out_dir)
        write_bundle(out, dataset)
        manifest = build_manifest(
            "build",
            req.model_dump(),
            [req.scene_graph, req.subject_allowlist, req.relation_allowlist],
            seed=req.seed,
        )
        manifest["placeholder_embeddings"] = True
        manifest["oracle_filtered"] = req.oracle.kind != "none"
        write_manifest(out, manifest)
        return _bundle_response(out, dataset)

    @app.post("/transform", response_model=models.TransformResponse)
    def transform(req: models.TransformRequest):
        dataset = _dataset_for(app, req.data_dir)
        cfg = TransformConfig(
            lam=req.lam,
            strategy=req.strategy,
            top_n=req.topn,
            exclude_self=req.exclude_self,
            delta_method=req.delta_method,
            normalize_delta=req.normalize_delta,
        )
        query = _resolve_query(dataset, req)
        hits = run_query(dataset, query, cfg)
        return models.TransformResponse(
            query_id=req.query_id,
            image_id=query.image_id,
            field=query.field,
            source_word=query.source_word,
            target_word=query.target_word,
            target_caption=dataset.caption_by_id[query.target_caption_id].text,
            hits=[
                models.HitModel(
                    item_id=h.item_id,
                    similarity=h.similarity,
                    triplet=list(
                        dataset.image_by_id[h.item_id].triplet.__dict__.values()
                    ),
                )
                for h in hits
            ],
        )

    @app.post("/eval", response_model=models.EvalResponse)
    def evaluate(req: models.EvalRequest):
        dataset = _dataset_for(app, req.data_dir)
        oracle = _make_oracle(req.oracle, dataset)
        cfg = TransformConfig(
            lam=req.lam,
            strategy=req.strategy,
            top_n=req.topn,
            exclude_self=req.exclude_self,
            delta_method=req.delta_method,
            normalize_delta=req.normalize_delta,
        )
        split = None if req.split == "all" else req.split
        files: list[str] = []
        if req.text_delta:
            score = text_delta_accuracy(dataset, split)
            if req.out_dir:
                out = Path(req.out_dir)
                out.mkdir(parents=True, exist_ok=True)
                write_json(
                    out / "report.json",
                    {"schema": 1, "kind": "text_delta", "score": score,
                     "split": req.split, "num_queries": len(dataset.split_queries(split))},
                )
                files.append(str(out / "report.json"))
                write_manifest(out, build_manifest("eval", req.model_dump(), [req.data_dir]))
            return models.EvalResponse(
                score=score,
                n=1,
                lam=1.0,
                strategy="text_delta",
                split=req.split,
                num_queries=len(dataset.split_queries(split)),
                report_files=files,
            )
        if req.annotation_match:
            report = annotation_match_score(dataset, cfg, split)
            if req.out_dir:
                out = Path(req.out_dir)
                out.mkdir(parents=True, exist_ok=True)
                write_json(out / "report.json", annotation_report_json(report))
                files.append(str(out / "report.json"))
                write_manifest(out, build_manifest("eval", req.model_dump(), [req.data_dir]))
            return models.EvalResponse(
                score=report.weighted_score,
                n=report.n,
                lam=report.lam,
                strategy=report.strategy,
                split=report.split,
                num_queries=report.num_queries,
                unweighted_score=report.unweighted_score,
                report_files=files,
            )
        report = simat_score(dataset, oracle, cfg, split)
        per_target = None
        if req.breakdown:
            per_target = {
                word: models.PerTarget(score=s, weight_share=share)
                for word, (s, share) in report.per_target.items()
            }
        if req.out_dir:
            out = Path(req.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "report.json", score_report_json(report))
            write_eval_csv(out / "report.csv", [report])
            files.extend([str(out / "report.json"), str(out / "report.csv")])
            if req.breakdown:
                write_breakdown_csv(out / "breakdown.csv", report)
                files.append(str(out / "breakdown.csv"))
            write_manifest(out, build_manifest("eval", req.model_dump(), [req.data_dir]))
        return models.EvalResponse(
            score=report.score,
            n=report.n,
            lam=report.lam,
            strategy=report.strategy,
            split=report.split,
            num_queries=report.num_queries,
            caption_leaking=report.caption_leaking,
            per_target=per_target,
            report_files=files,
        )

    @app.post("/sweep", response_model=models.SweepResponse)
    def run_sweep(req: models.SweepRequest):
        dataset = _dataset_for(app, req.data_dir)
        oracle = _make_oracle(req.oracle, dataset)
        heads = {}
        if req.heads:
            for tau_label, head_dir in req.heads.items():
                head_dir = Path(head_dir)
                heads[tau_label] = (
                    load_head(head_dir / "image_head.smhd"),
                    load_head(head_dir / "text_head.smhd"),
                )
        else:
            heads["raw"] = None
        base_cfg = TransformConfig(
            top_n=req.topn, delta_method=req.delta_method, strategy="delta"
        )
        split = None if req.split == "all" else req.split
        cells, summaries = sweep(
            dataset, oracle, req.lambdas, req.strategies, heads, base_cfg, split
        )
        files: list[str] = []
        if req.out_dir:
            out = Path(req.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_sweep_csv(out / "sweep.csv", cells)
            write_sweep_summary_csv(out / "sweep_summary.csv", summaries)
            write_sweep_svg(out / "sweep.svg", cells)
            files = [str(out / n) for n in ("sweep.csv", "sweep_summary.csv", "sweep.svg")]
            write_manifest(out, build_manifest("sweep", req.model_dump(), [req.data_dir]))
        return models.SweepResponse(
            cells=[models.SweepCellModel(**c.__dict__) for c in cells],
            summaries=[models.SweepSummaryModel(**s.__dict__) for s in summaries],
            report_files=files,
        )

    @app.post("/train", response_model=models.TrainResponse)
    def train(req: models.TrainRequest):
        image_features = read_embeddings_for_training(req.image_features)
        text_features = read_embeddings_for_training(req.text_features)
        cfg = TrainConfig(
            tau=req.tau,
            learning_rate=req.learning_rate,
            epochs=req.epochs,
            batch_size=req.batch_size,
            seed=req.seed,
            optimizer=req.optimizer,
            head_kind=req.head_kind,
            output_dim=req.output_dim,
            hidden_dim=req.hidden_dim,
            loss_form=req.loss_form,
        )
        image_head, text_head, history = train_heads(image_features, text_features, cfg)
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_head(image_head, out / "image_head.smhd")
        save_head(text_head, out / "text_head.smhd")
        write_loss_history(out / "loss_history.csv", history)
        write_manifest(
            out,
            build_manifest(
                "train", req.model_dump(), [req.image_features, req.text_features], seed=req.seed
            ),
        )
        return models.TrainResponse(
            image_head=str(out / "image_head.smhd"),
            text_head=str(out / "text_head.smhd"),
            loss_history=history,
            final_loss=history[-1] if history else float("nan"),
        )

    @app.post("/gradcheck", response_model=models.GradCheckResponse)
    def gradcheck(req: models.GradCheckRequest):
        rng = np.random.default_rng(req.seed)

        def unit_batch():
            batch = rng.normal(size=(req.batch, req.dim))
            return batch / np.linalg.norm(batch, axis=1, keepdims=True)

        i_emb, t_emb = unit_batch(), unit_batch()
        size = req.batch * req.dim

        def loss_fn(params):
            i = params[:size].reshape(req.batch, req.dim)
            t = params[size:].reshape(req.batch, req.dim)
            loss, gi, gt = infonce_grad(i, t, req.tau, req.loss_form)
            return loss, np.concatenate([gi.ravel(), gt.ravel()])

        params = np.concatenate([i_emb.ravel(), t_emb.ravel()])
        error = grad_check(loss_fn, params, req.eps)
        return models.GradCheckResponse(
            max_rel_error=error, passed=bool(error < 1e-5), threshold=1e-5
        )

    return app


def _summary(name: str, path: str, dataset: Dataset) -> models.DatasetSummary:
    return models.DatasetSummary(
        name=name,
        path=path,
        num_images=len(dataset.images),
        num_captions=len(dataset.captions),
        num_words=len(dataset.words),
        num_queries=len(dataset.queries),
        dim=dataset.image_embeddings.dim,
    )


def _bundle_response(out: Path, dataset: Dataset) -> models.BundleResponse:
    return models.BundleResponse(
        out_dir=str(out),
        num_images=len(dataset.images),
        num_captions=len(dataset.captions),
        num_queries=len(dataset.queries),
        dim=dataset.image_embeddings.dim,
    )


def _dataset_for(app: FastAPI, data_dir: str) -> Dataset:
    """Named registry entries take priority; otherwise load from disk."""
    if data_dir in app.state.datasets:
        return app.state.datasets[data_dir][1]
    return load_dataset(data_dir)


def _resolve_query(dataset: Dataset, req: models.TransformRequest):
    """User-supplied identifiers that fail to resolve are usage errors."""
    from ..store import TransformationQuery

    if req.query_id:
        for q in dataset.queries:
            if q.query_id == req.query_id:
                return q
        raise UsageError(f"unknown query {req.query_id!r}")
    if not (req.image_id and req.field and req.target_word):
        raise UsageError("provide either query_id or image_id + field + target_word")
    image = dataset.image_by_id.get(req.image_id)
    if image is None:
        raise UsageError(f"unknown image {req.image_id!r}")
    if req.target_word not in dataset.word_row:
        raise UsageError(f"unknown word {req.target_word!r}: no word embedding")
    source_word = image.triplet.get(req.field)
    target_triplet = image.triplet.replace(req.field, req.target_word)
    caption = dataset.caption_by_triplet.get(target_triplet)
    if caption is None:
        raise UsageError(
            f"no caption for target triplet {target_triplet}; "
            "the transformation is not realizable in this dataset"
        )
    return TransformationQuery(
        query_id="adhoc",
        image_id=req.image_id,
        field=req.field,
        source_word=source_word,
        target_word=req.target_word,
        target_caption_id=caption.caption_id,
        weight=1.0,
    )


def _make_oracle(spec: models.OracleSpec, dataset: Dataset | None):
    if spec.kind == "mock":
        if dataset is None:
            raise ConfigError("mock oracle needs a dataset with annotations")
        return MockOracle.for_dataset(dataset)
    if spec.kind == "table":
        if not spec.table_path:
            raise ConfigError("table oracle needs table_path")
        return load_table_oracle(spec.table_path)
    if spec.kind == "remote":
        url = spec.url or os.environ.get("SIMAT_ORACLE_URL")
        if not url:
            raise ConfigError("remote oracle needs url or SIMAT_ORACLE_URL")
        captions = (
            {rec.caption_id: rec.text for rec in dataset.captions} if dataset else {}
        )
        return RemoteOracle(url, captions, cache_path=spec.cache_path)
    raise ConfigError(f"unknown oracle kind {spec.kind!r}")
