"""Command-line client for the engine service.

Every subcommand builds a typed request and sends it through the HTTP
layer: against a remote server when --server (or SIMAT_SERVER) is set,
otherwise against an in-process instance of the same app, so batch runs
need no separately managed daemon. The CLI itself contains no engine
logic; it only formats requests and responses.

Exit codes: 0 success, 2 usage/config, 3 data/coverage, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import asyncio
import os
import sys
from pathlib import Path

import httpx

from . import __version__

GRADCHECK_THRESHOLD = 1e-5


def _read_config_file(path: str) -> dict[str, str]:
    """key=value lines (toml-like); '#' starts a comment."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        print(f"error: cannot read config file {path}: {exc}", file=sys.stderr)
        raise SystemExit(2)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            print(f"error: {path}:{lineno}: expected key = value", file=sys.stderr)
            raise SystemExit(2)
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip().strip("\"'")
    return values


class _Defaults:
    """Flag defaults with config-file overrides; CLI flags win over both."""

    def __init__(self, config: dict[str, str]):
        self.config = config

    def get(self, dest: str, fallback, conv=None):
        if dest not in self.config:
            return fallback
        raw = self.config[dest]
        if conv is bool or isinstance(fallback, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if conv is not None:
            return conv(raw)
        if isinstance(fallback, int):
            return int(raw)
        if isinstance(fallback, float):
            return float(raw)
        return raw


class ClientError(Exception):
    """A failed service call, carrying the structured error body."""

    def __init__(self, kind: str, message: str, exit_code: int, missing=None):
        super().__init__(message)
        self.kind = kind
        self.exit_code = exit_code
        self.missing = missing or []


class Client:
    """Thin HTTP client; in-process ASGI unless a server URL is given."""

    def __init__(self, server_url: str | None):
        self.server_url = server_url

    def post(self, path: str, payload: dict) -> dict:
        if self.server_url:
            try:
                response = httpx.post(
                    self.server_url.rstrip("/") + path, json=payload, timeout=600
                )
            except httpx.HTTPError as exc:
                raise ClientError(
                    "transport", f"cannot reach server {self.server_url}: {exc}", 3
                ) from exc
            return self._handle(response.status_code, response.json())
        return self._handle(*self._inprocess("POST", path, payload))

    def _inprocess(self, method: str, path: str, payload: dict):
        from .service import create_app

        app = create_app()

        async def go():
            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://simat.internal", timeout=None
            ) as client:
                response = await client.request(method, path, json=payload)
                return response.status_code, response.json()

        return asyncio.run(go())

    @staticmethod
    def _handle(status: int, body: dict) -> dict:
        if status < 400:
            return body
        if "error" in body:
            err = body["error"]
            raise ClientError(
                err["kind"], err["message"], err.get("exit_code", 1), err.get("missing")
            )
        raise ClientError("usage", f"HTTP {status}: {body.get('detail', body)}", 2)


def _oracle_spec(value: str, cache: str | None = None) -> dict:
    if value == "mock":
        return {"kind": "mock"}
    if value == "none":
        return {"kind": "none"}
    if value == "remote":
        return {"kind": "remote", "url": os.environ.get("SIMAT_ORACLE_URL"), "cache_path": cache}
    if value.startswith("table:"):
        return {"kind": "table", "table_path": value.split(":", 1)[1]}
    print(
        f"error: bad --oracle {value!r} (expected mock, none, remote, or table:PATH)",
        file=sys.stderr,
    )
    raise SystemExit(2)


def _parse_lambdas(args) -> list[float]:
    if args.lambda_grid:
        try:
            start, stop, step = (float(x) for x in args.lambda_grid.split(":"))
        except ValueError:
            print("error: --lambda-grid expects start:stop:step", file=sys.stderr)
            raise SystemExit(2)
        if step <= 0 or stop < start:
            print("error: bad --lambda-grid range", file=sys.stderr)
            raise SystemExit(2)
        out = []
        value = start
        while value <= stop + 1e-12:
            out.append(round(value, 10))
            value += step
        return out
    if args.lambdas:
        return [float(x) for x in args.lambdas.split(",")]
    print("error: provide --lambdas or --lambda-grid", file=sys.stderr)
    raise SystemExit(2)


def build_parser(defaults: _Defaults) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simat",
        description="Embedding-arithmetic retrieval engine and benchmark harness",
    )
    parser.add_argument("--version", action="version", version=f"simat {__version__}")
    parser.add_argument(
        "--server",
        default=os.environ.get("SIMAT_SERVER"),
        help="base URL of a running simat server (default: run in-process)",
    )
    parser.add_argument("--config", help="key=value file overriding flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)
    d = defaults.get

    p = sub.add_parser("synth", help="generate a synthetic compositional bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=d("subjects", 4))
    p.add_argument("--relations", type=int, default=d("relations", 4))
    p.add_argument("--objects", type=int, default=d("objects", 4))
    p.add_argument("--images-per-triplet", type=int, default=d("images_per_triplet", 2))
    p.add_argument("--dim", type=int, default=d("dim", 32))
    p.add_argument("--sigma", type=float, default=d("sigma", 0.0))
    p.add_argument("--density", type=float, default=d("density", 1.0))
    p.add_argument("--seed", type=int, default=d("seed", 0))

    p = sub.add_parser("build", help="build a benchmark bundle from a scene graph")
    p.add_argument("--scene-graph", required=True)
    p.add_argument("--subject-allowlist", required=True)
    p.add_argument("--relation-allowlist", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oracle", default=d("oracle", "none"), help="none, table:PATH, or remote")
    p.add_argument("--oracle-hi", type=float, default=d("oracle_hi", 0.9))
    p.add_argument("--oracle-lo", type=float, default=d("oracle_lo", 0.1))
    p.add_argument("--max-objects", type=int, default=d("max_objects", 10))
    p.add_argument("--min-images", type=int, default=d("min_images", 2))
    p.add_argument("--seed", type=int, default=d("seed", 0))
    p.add_argument("--template", default=d("template", "A {subject} {relation} a {object}"))
    p.add_argument("--captions-override")
    p.add_argument("--embedding-dim", type=int, default=d("embedding_dim", 32))
    p.add_argument("--embeddings-seed", type=int, default=d("embeddings_seed", 0))

    p = sub.add_parser("eval", help="score transformations on a bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", default=d("strategy", "delta"))
    p.add_argument("--lambda", dest="lam", type=float, default=d("lam", 1.0))
    p.add_argument("--topn", type=int, default=d("topn", 1))
    p.add_argument("--split", default=d("split", "all"), choices=["dev", "test", "all"])
    p.add_argument("--oracle", default=d("oracle", "mock"))
    p.add_argument("--oracle-cache")
    p.add_argument("--delta-method", default=d("delta_method", "single_word"))
    p.add_argument("--normalize-delta", action="store_true", default=d("normalize_delta", False))
    p.add_argument("--no-exclude-self", action="store_true")
    p.add_argument("--breakdown", action="store_true", default=d("breakdown", False))
    p.add_argument("--annotation-match", action="store_true")
    p.add_argument("--text-delta", action="store_true")
    p.add_argument("--out", default=d("out", "."), help="report directory (default: cwd)")

    p = sub.add_parser("sweep", help="score over a lambda x strategy x checkpoint grid")
    p.add_argument("--data", required=True)
    p.add_argument("--lambdas", default=d("lambdas", None, str))
    p.add_argument("--lambda-grid", default=d("lambda_grid", None, str))
    p.add_argument("--strategies", default=d("strategies", "delta"))
    p.add_argument(
        "--heads",
        action="append",
        default=None,
        help="TAU=DIR with image_head.smhd/text_head.smhd (repeatable)",
    )
    p.add_argument("--topn", type=int, default=d("topn", 1))
    p.add_argument("--split", default=d("split", "dev"), choices=["dev", "test", "all"])
    p.add_argument("--oracle", default=d("oracle", "mock"))
    p.add_argument("--delta-method", default=d("delta_method", "single_word"))
    p.add_argument("--out", default=d("out", "."), help="report directory (default: cwd)")

    p = sub.add_parser("train", help="train adaptation heads on paired features")
    p.add_argument("--image-features", required=True)
    p.add_argument("--text-features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float, default=d("tau", 0.1))
    p.add_argument("--lr", type=float, default=d("lr", 1e-3))
    p.add_argument("--epochs", type=int, default=d("epochs", 30))
    p.add_argument("--batch-size", type=int, default=d("batch_size", 256))
    p.add_argument("--seed", type=int, default=d("seed", 0))
    p.add_argument("--optimizer", default=d("optimizer", "adam"), choices=["adam", "sgd"])
    p.add_argument("--head", default=d("head", "linear"), choices=["linear", "mlp4"])
    p.add_argument("--output-dim", type=int, default=d("output_dim", 512))
    p.add_argument("--hidden-dim", type=int, default=d("hidden_dim", None, int))
    p.add_argument(
        "--loss-form",
        default=d("loss_form", "infonce"),
        choices=["infonce", "paper_literal"],
    )

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--batch", type=int, default=d("batch", 8))
    p.add_argument("--dim", type=int, default=d("dim", 16))
    p.add_argument("--tau", type=float, default=d("tau", 0.1))
    p.add_argument("--eps", type=float, default=d("eps", 1e-5))
    p.add_argument("--seed", type=int, default=d("seed", 0))
    p.add_argument(
        "--loss-form",
        default=d("loss_form", "infonce"),
        choices=["infonce", "paper_literal"],
    )

    p = sub.add_parser("transform", help="run one transformation query and print the hits")
    p.add_argument("--data", required=True)
    p.add_argument("--query-id")
    p.add_argument("--image")
    p.add_argument("--field", choices=["subject", "relation", "object"])
    p.add_argument("--target")
    p.add_argument("--lambda", dest="lam", type=float, default=d("lam", 1.0))
    p.add_argument("--strategy", default=d("strategy", "delta"))
    p.add_argument("--topn", type=int, default=d("topn", 5))
    p.add_argument("--delta-method", default=d("delta_method", "single_word"))
    p.add_argument("--no-exclude-self", action="store_true")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default=d("host", "127.0.0.1"))
    p.add_argument("--port", type=int, default=d("port", 8000))
    p.add_argument("--data", help="bundle served for /score and named 'default'")
    p.add_argument("--oracle", default=d("oracle", "mock"))

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    config: dict[str, str] = {}
    if "--config" in argv:
        idx = argv.index("--config")
        if idx + 1 >= len(argv):
            print("error: --config needs a path", file=sys.stderr)
            return 2
        config = _read_config_file(argv[idx + 1])
    parser = build_parser(_Defaults(config))
    args = parser.parse_args(argv)
    client = Client(args.server)

    try:
        return _dispatch(args, client)
    except ClientError as exc:
        print(f"error ({exc.kind}): {exc}", file=sys.stderr)
        if exc.missing:
            path = _write_missing_pairs(args, exc.missing)
            print(f"missing-pair list written to {path}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:
        return int(exc.code or 0)


def _write_missing_pairs(args, missing) -> Path:
    out = Path(getattr(args, "out", None) or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "missing_pairs.tsv"
    lines = ["image_id\tcaption_id"]
    lines += [f"{image_id}\t{caption_id}" for image_id, caption_id in missing]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _dispatch(args, client: Client) -> int:
    if args.command == "synth":
        body = client.post(
            "/synth",
            {
                "out_dir": args.out,
                "subjects": args.subjects,
                "relations": args.relations,
                "objects": args.objects,
                "images_per_triplet": args.images_per_triplet,
                "dim": args.dim,
                "sigma": args.sigma,
                "density": args.density,
                "seed": args.seed,
            },
        )
        print(
            f"wrote bundle to {body['out_dir']}: {body['num_images']} images, "
            f"{body['num_captions']} captions, {body['num_queries']} queries, dim {body['dim']}"
        )
        return 0

    if args.command == "build":
        body = client.post(
            "/build",
            {
                "scene_graph": args.scene_graph,
                "subject_allowlist": args.subject_allowlist,
                "relation_allowlist": args.relation_allowlist,
                "out_dir": args.out,
                "oracle": _oracle_spec(args.oracle),
                "oracle_hi": args.oracle_hi,
                "oracle_lo": args.oracle_lo,
                "max_objects": args.max_objects,
                "min_images": args.min_images,
                "seed": args.seed,
                "template": args.template,
                "captions_override": args.captions_override,
                "embedding_dim": args.embedding_dim,
                "embeddings_seed": args.embeddings_seed,
            },
        )
        print(
            f"wrote bundle to {body['out_dir']}: {body['num_images']} images, "
            f"{body['num_captions']} captions, {body['num_queries']} queries"
        )
        return 0

    if args.command == "eval":
        body = client.post(
            "/eval",
            {
                "data_dir": args.data,
                "strategy": args.strategy,
                "lam": args.lam,
                "topn": args.topn,
                "split": args.split,
                "oracle": _oracle_spec(args.oracle, args.oracle_cache),
                "delta_method": args.delta_method,
                "normalize_delta": args.normalize_delta,
                "exclude_self": not args.no_exclude_self,
                "breakdown": args.breakdown,
                "annotation_match": args.annotation_match,
                "text_delta": args.text_delta,
                "out_dir": args.out,
            },
        )
        label = "annotation-match" if args.annotation_match else (
            "text-delta accuracy" if args.text_delta else "score"
        )
        note = " (caption-leaking)" if body.get("caption_leaking") else ""
        print(
            f"{label} {body['score']:.1f} | strategy {body['strategy']} lambda {body['lam']} "
            f"n {body['n']} split {body['split']} queries {body['num_queries']}{note}"
        )
        if body.get("unweighted_score") is not None:
            print(f"unweighted {body['unweighted_score']:.1f}")
        if body.get("per_target"):
            for word, cell in sorted(body["per_target"].items()):
                print(f"  target {word}: {cell['score']:.1f} (share {cell['weight_share']:.4f})")
        for path in body.get("report_files", []):
            print(f"wrote {path}")
        return 0

    if args.command == "sweep":
        heads = {}
        for item in args.heads or []:
            if "=" not in item:
                print(f"error: --heads expects TAU=DIR, got {item!r}", file=sys.stderr)
                return 2
            tau, head_dir = item.split("=", 1)
            heads[tau] = head_dir
        body = client.post(
            "/sweep",
            {
                "data_dir": args.data,
                "lambdas": _parse_lambdas(args),
                "strategies": args.strategies.split(","),
                "heads": heads,
                "topn": args.topn,
                "split": args.split,
                "oracle": _oracle_spec(args.oracle),
                "delta_method": args.delta_method,
                "out_dir": args.out,
            },
        )
        for s in body["summaries"]:
            print(
                f"tau {s['tau']} strategy {s['strategy']}: best lambda {s['lambda_star']} "
                f"with score {s['score']:.1f}"
            )
        for path in body.get("report_files", []):
            print(f"wrote {path}")
        return 0

    if args.command == "train":
        body = client.post(
            "/train",
            {
                "image_features": args.image_features,
                "text_features": args.text_features,
                "out_dir": args.out,
                "tau": args.tau,
                "learning_rate": args.lr,
                "epochs": args.epochs,
                "batch_size": args.batch_size,
                "seed": args.seed,
                "optimizer": args.optimizer,
                "head_kind": args.head,
                "output_dim": args.output_dim,
                "hidden_dim": args.hidden_dim,
                "loss_form": args.loss_form,
            },
        )
        print(
            f"trained heads -> {body['image_head']}, {body['text_head']} "
            f"(final loss {body['final_loss']:.6f})"
        )
        return 0

    if args.command == "gradcheck":
        body = client.post(
            "/gradcheck",
            {
                "batch": args.batch,
                "dim": args.dim,
                "tau": args.tau,
                "eps": args.eps,
                "seed": args.seed,
                "loss_form": args.loss_form,
            },
        )
        print(f"max relative error {body['max_rel_error']:.3e} (threshold {body['threshold']:g})")
        return 0 if body["passed"] else 4

    if args.command == "transform":
        body = client.post(
            "/transform",
            {
                "data_dir": args.data,
                "query_id": args.query_id,
                "image_id": args.image,
                "field": args.field,
                "target_word": args.target,
                "lam": args.lam,
                "strategy": args.strategy,
                "topn": args.topn,
                "exclude_self": not args.no_exclude_self,
                "delta_method": args.delta_method,
            },
        )
        print(
            f"{body['image_id']}: {body['field']} {body['source_word']} -> "
            f"{body['target_word']} | target caption: {body['target_caption']}"
        )
        for rank, hit in enumerate(body["hits"], 1):
            triplet = " ".join(hit["triplet"])
            print(f"  {rank}. {hit['item_id']}  sim {hit['similarity']:.4f}  ({triplet})")
        return 0

    if args.command == "serve":
        import uvicorn

        from .service import create_app

        spec = None
        if args.data:
            from .service.models import OracleSpec

            spec = OracleSpec(**_oracle_spec(args.oracle))
        app = create_app(bundle_dir=args.data, oracle_spec=spec)
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
