"""Report serialization (JSON + CSV) and run manifests.

JSON reports carry the full per-query outcomes for audit; CSVs carry the
summary rows. Every command that writes an output bundle also drops a
manifest.json capturing the exact config, input digests, seed, and tool
version, so a run can be reproduced from its manifest alone.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .evaluation import AnnotationMatchReport, ScoreReport, SweepCell, SweepSummary
from .store import _atomic_write_text

SCHEMA_VERSION = 1

SWEEP_CSV_COLUMNS = ["tau", "lambda", "strategy", "n", "split", "score"]
SUMMARY_CSV_COLUMNS = ["tau", "strategy", "n", "split", "lambda_star", "score"]
EVAL_CSV_COLUMNS = ["strategy", "lambda", "n", "split", "score", "num_queries"]


def format_score(score: float) -> str:
    """Scores print with one decimal, like the reference tables."""
    return f"{score:.1f}"


def score_report_json(report: ScoreReport) -> dict:
    body = asdict(report)
    body["per_target"] = {
        word: {"score": pair[0], "weight_share": pair[1]}
        for word, pair in report.per_target.items()
    }
    return {"schema": SCHEMA_VERSION, "kind": "simat_score", **body}


def annotation_report_json(report: AnnotationMatchReport) -> dict:
    return {"schema": SCHEMA_VERSION, "kind": "annotation_match", **asdict(report)}


def write_json(path: str | Path, payload: dict) -> None:
    _atomic_write_text(Path(path), json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_eval_csv(path: str | Path, reports: list[ScoreReport]) -> None:
    lines = [",".join(EVAL_CSV_COLUMNS)]
    for r in reports:
        lines.append(
            f"{r.strategy},{r.lam!r},{r.n},{r.split},{format_score(r.score)},{r.num_queries}"
        )
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def write_breakdown_csv(path: str | Path, report: ScoreReport) -> None:
    lines = ["target,score,weight_share"]
    for word, (score, share) in report.per_target.items():
        lines.append(f"{word},{format_score(score)},{share!r}")
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def write_sweep_csv(path: str | Path, cells: list[SweepCell]) -> None:
    lines = [",".join(SWEEP_CSV_COLUMNS)]
    for c in cells:
        lines.append(
            f"{c.tau},{c.lam!r},{c.strategy},{c.n},{c.split},{format_score(c.score)}"
        )
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def write_sweep_summary_csv(path: str | Path, summaries: list[SweepSummary]) -> None:
    lines = [",".join(SUMMARY_CSV_COLUMNS)]
    for s in summaries:
        lines.append(
            f"{s.tau},{s.strategy},{s.n},{s.split},{s.lambda_star!r},{format_score(s.score)}"
        )
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(
    command: str,
    config: dict,
    input_paths: list[str | Path],
    seed: int | None = None,
) -> dict:
    digests = {}
    for p in input_paths:
        p = Path(p)
        if p.is_file():
            digests[str(p)] = file_digest(p)
        elif p.is_dir():
            for child in sorted(p.rglob("*")):
                if child.is_file():
                    digests[str(child)] = file_digest(child)
    return {
        "schema": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "inputs": digests,
        "seed": seed,
        "tool_version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }


def write_manifest(directory: str | Path, manifest: dict) -> None:
    write_json(Path(directory) / "manifest.json", manifest)
