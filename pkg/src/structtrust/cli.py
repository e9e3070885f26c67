"""Command-line entry point: ``structtrust score | generate | evaluate``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Sequence

from .backend import BackendError, ChatBackend, MockBackend, OpenAIBackend
from .config import ConfigError, ScoringConfig, load_config
from .core import InvalidInput, ScoringTask, TrustReport, dump_value
from .engine import Scorer, ScoringError
from .evaluation import DETECTORS, DatasetError, evaluate, generate, load_dataset, load_outputs, render_table
from .templates import TemplateError

EXIT_OK = 0
EXIT_INVALID_INPUT = 2
EXIT_BACKEND = 3

log = logging.getLogger("structtrust")


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _config(args: argparse.Namespace) -> ScoringConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(
        base_url=args.base_url,
        model=args.model,
        deadline_ms=args.deadline_ms,
        field_threshold=args.field_threshold,
        template_dir=args.template_dir,
        mock_script=args.mock_script,
        concurrency=getattr(args, "concurrency", None),
        adaptive_timeout=True if args.adaptive_timeout else None,
    )


def build_backend(cfg: ScoringConfig) -> ChatBackend:
    if cfg.mock_script:
        return MockBackend.from_file(cfg.mock_script)
    return OpenAIBackend(base_url=cfg.base_url, model=cfg.model, timeout_s=cfg.request_timeout_s)


def _show_value(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)


def render_report(task: ScoringTask, report: TrustReport) -> str:
    lines = [f"Trustworthiness score: {report.trustworthiness_score:.4f}"]
    if report.doc_explanation:
        lines.append(f"Explanation: {report.doc_explanation}")
    lines += ["", "Per-field scores:"]
    lines += [f"  {name}: {score:.4f}" for name, score in report.per_field_scores.items()]
    lines += ["", f"Untrustworthy fields: {list(report.untrustworthy_fields)}"]
    for name in report.untrustworthy_fields:
        lines += [
            "",
            f"Field: {name}",
            f"Response: {_show_value(task.generated_output[name])}",
            f"Score: {report.per_field_scores[name]:.4f}",
            f"Explanation: {report.per_field_explanations.get(name, '')}",
        ]
    lines += ["", "Verifier calls:"]
    for rec in report.diagnostics:
        detail = f" ({rec.detail})" if rec.detail else ""
        lines.append(f"  {rec.template_id}: {rec.outcome}, {rec.latency_ms} ms{detail}")
    return "\n".join(lines) + "\n"


def _read_task(path: str) -> ScoringTask:
    try:
        text = Path(path).read_text("utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InvalidInput(f"cannot read task file: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return ScoringTask.from_dict(data)


def cmd_score(args: argparse.Namespace) -> int:
    try:
        cfg = _config(args)
        task = _read_task(args.task_file)
        scorer = Scorer(build_backend(cfg), cfg)
    except (InvalidInput, ConfigError, TemplateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    try:
        report = scorer.score(task)
    except ScoringError as exc:
        print(f"scoring failed: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    if args.json:
        sys.stdout.write(dump_value(report.to_dict()) + "\n")
    else:
        sys.stdout.write(render_report(task, report))
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        cfg = _config(args)
        examples = load_dataset(args.dataset)
        out = Path(args.out)
        existing = load_outputs(out) if args.resume and out.exists() else {}
        backend = build_backend(cfg)
    except (InvalidInput, ConfigError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    records = generate(examples, backend, cfg, existing)
    atomic_write(out, "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in records))
    failed = [r for r in records if r.status != "completed"]
    reused = sum(1 for ex in examples if ex.id in existing and existing[ex.id].status == "completed")
    print(f"{len(records) - len(failed)} outputs stored ({reused} reused), {len(failed)} failed -> {out}")
    for r in failed:
        print(f"  {r.id}: {r.error}", file=sys.stderr)
    return EXIT_OK


def input_digest(paths: Sequence[Path], detectors: Sequence[str], cfg: ScoringConfig) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.read_bytes())
        h.update(b"\0")
    settings = dataclasses.asdict(cfg)
    settings.pop("concurrency")
    for key in ("mock_script",):
        if settings[key]:
            settings[key] = hashlib.sha256(Path(settings[key]).read_bytes()).hexdigest()
    h.update(json.dumps({"detectors": list(detectors), "config": settings}, sort_keys=True).encode())
    return h.hexdigest()


def _detector_list(text: str) -> list[str]:
    names = [d.strip() for d in text.split(",") if d.strip()]
    if not names:
        raise argparse.ArgumentTypeError("at least one detector is required")
    unknown = [d for d in names if d not in DETECTORS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown detector(s) {unknown}; choose from {', '.join(DETECTORS)}")
    return list(dict.fromkeys(names))


def cmd_evaluate(args: argparse.Namespace) -> int:
    try:
        cfg = _config(args)
        examples = load_dataset(args.dataset)
        outputs = load_outputs(args.outputs)
        needs_backend = any(d != "logprob" for d in args.detectors)
        backend = build_backend(cfg) if needs_backend else None
        digest = input_digest([Path(args.dataset), Path(args.outputs)], args.detectors, cfg)
    except (InvalidInput, ConfigError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    try:
        report = evaluate(examples, outputs, args.detectors, backend, cfg)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT

    doc = {"input_digest": digest, "detectors": list(args.detectors), **report.to_dict()}
    table = render_table(report)
    out_dir = Path(args.out_dir)
    stem = f"report-{digest[:16]}"
    atomic_write(out_dir / f"{stem}.json", json.dumps(doc, indent=2, ensure_ascii=False) + "\n")
    atomic_write(out_dir / f"{stem}.txt", table)
    if args.json:
        sys.stdout.write(json.dumps(doc, indent=2, ensure_ascii=False) + "\n")
    else:
        sys.stdout.write(table)
        print(f"\nreport written to {out_dir / stem}.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or TOML config file")
    common.add_argument("--base-url", help="OpenAI-compatible base URL (default: $CONSTRUCT_BASE_URL)")
    common.add_argument("--model", help="model name")
    common.add_argument("--deadline-ms", type=int, help="per-batch verifier deadline in milliseconds")
    common.add_argument("--adaptive-timeout", action="store_true", help="shrink the deadline to 2x median latency")
    common.add_argument("--field-threshold", type=float, help="fields scoring below this are untrustworthy")
    common.add_argument("--template-dir", help="directory of <template_id>.txt overrides")
    common.add_argument("--mock-script", help="replay scripted replies instead of calling an endpoint")
    common.add_argument("--json", action="store_true", help="machine-readable output only")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="structtrust", description="Trustworthiness scoring for LLM structured outputs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", parents=[common], help="score one generated structured output")
    p.add_argument("task_file", help="JSON file with system, user, schema, generated_output[, logprobs]")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("generate", parents=[common], help="generate structured outputs for a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="outputs file (JSON lines)")
    p.add_argument("--resume", action="store_true", help="keep completed records already in --out")
    p.add_argument("--concurrency", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate detectors against ground truth")
    p.add_argument("dataset")
    p.add_argument("outputs")
    p.add_argument("--detectors", type=_detector_list, required=True, help=f"comma-separated: {', '.join(DETECTORS)}")
    p.add_argument("--out-dir", default="reports")
    p.add_argument("--concurrency", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
