"""Command-line interface.

Commands: ``ingest``, ``kb ingest``, ``optimize``, ``run``, ``eval``,
``report``.  Exit codes: 0 success, 1 usage error, 2 pipeline error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import PipelineConfig, load_config, load_error_types
from .errors import IssuePatchError, UsageError
from .evaluation import EvalReport, MetricBlock
from .generation import PatchPair, dump_pairs
from .ingest import (
    denoise_corpus,
    dump_corpus,
    load_corpus,
    load_raw_documents,
    load_split,
    merge_similar_segments,
    preprocess_ir,
    save_split,
    split_dataset,
)
from .knowledge import KnowledgeStore, ingest_kb, load_store
from .pipeline import (
    build_ir_results,
    dump_run_records,
    load_run_records,
    optimize_all,
    run_corpus,
)
from .prompts import load_templates
from .evaluation import bucket_by_iterations

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PIPELINE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="issuepatch", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="preprocess, denoise and split a raw corpus")
    p.add_argument("--in", dest="input", required=True, help="raw JSONL of markup documents")
    p.add_argument("--out", required=True, help="preprocessed corpus JSONL")
    p.add_argument("--merge-threshold", type=float, default=0.9)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kb", help="knowledge store used for deprecated-CVE denoising")
    p.add_argument("--split-out", help="split JSON (default: <out>.split.json)")

    kb = sub.add_parser("kb", help="knowledge-base commands")
    kb_sub = kb.add_subparsers(dest="kb_command", required=True)
    ki = kb_sub.add_parser("ingest", help="validate and index a knowledge base")
    ki.add_argument("--in", dest="input", required=True, help="knowledge JSONL")
    ki.add_argument("--out", required=True, help="store directory")

    p = sub.add_parser("optimize", help="auto-prompt templates on the prompt pool")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--kb")
    p.add_argument("--out", required=True, help="prompt store directory")

    p = sub.add_parser("run", help="run the pipeline over the evaluation pool")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--kb")
    p.add_argument("--templates", help="prompt store directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--timings", action="store_true", help="persist per-stage timings")

    p = sub.add_parser("eval", help="recompute the report from persisted records")
    p.add_argument("--records", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("report", help="render a report")
    p.add_argument("--in", dest="input", required=True, help="report JSON")
    p.add_argument("--format", choices=("text", "json"), default="text")
    return parser


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _load_kb(path: str | None) -> KnowledgeStore:
    if not path:
        return KnowledgeStore()
    return load_store(_require_file(path, "knowledge store"))


def _cmd_ingest(args) -> int:
    raw = load_raw_documents(_require_file(args.input, "input corpus"))
    kb = _load_kb(args.kb)
    warnings: list = []
    corpus = []
    for doc in raw:
        ir = preprocess_ir(doc, warnings=warnings)
        ir.body_segments = merge_similar_segments(ir.body_segments, args.merge_threshold)
        corpus.append(ir)
    kept, removed = denoise_corpus(corpus, kb)
    split = split_dataset(kept, args.split_ratio, args.seed)
    dump_corpus(kept, args.out)
    split_path = args.split_out or f"{args.out}.split.json"
    save_split(split, split_path)
    meta = {
        "total_raw": len(raw),
        "kept": len(kept),
        "removed": [{"id": i, "reason": r} for i, r in removed],
        "prompt_set_size": len(split.prompt_set),
        "eval_set_size": len(split.eval_set),
        "preprocess_warnings": warnings,
        "seed": args.seed,
        "merge_threshold": args.merge_threshold,
        "split_ratio": args.split_ratio,
    }
    Path(f"{args.out}.meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(
        f"ingested {len(kept)}/{len(raw)} reports "
        f"({len(split.prompt_set)} prompt / {len(split.eval_set)} eval), "
        f"removed {len(removed)}"
    )
    return EXIT_OK


def _cmd_kb_ingest(args) -> int:
    store = ingest_kb(_require_file(args.input, "knowledge base"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.dump(out / "items.jsonl")
    meta = {
        "items": len(store),
        "cwe_ids": sorted(store.by_cwe),
        "deprecated": sorted(store.deprecated_ids()),
    }
    (out / "meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"ingested {len(store)} knowledge items into {out}")
    return EXIT_OK


def _pools(args) -> tuple[list, list, PipelineConfig]:
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    split = load_split(_require_file(args.split, "split"))
    cfg = load_config(_require_file(args.config, "config"))
    by_id = {ir.id: ir for ir in corpus}
    prompt = [by_id[i] for i in split.prompt_set if i in by_id]
    evaluation = [by_id[i] for i in split.eval_set if i in by_id]
    return prompt, evaluation, cfg


def _cmd_optimize(args) -> int:
    prompt, _, cfg = _pools(args)
    store = _load_kb(args.kb)
    templates = load_templates(None, load_error_types(cfg))
    optimize_all(prompt, cfg, store, templates, store_dir=args.out)
    print(f"optimized {len(templates)} templates into {args.out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    _, evaluation, cfg = _pools(args)
    store = _load_kb(args.kb)
    templates = load_templates(args.templates, load_error_types(cfg))
    records, report = run_corpus(evaluation, cfg, store, templates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_records(records, out / "records.jsonl", include_timings=args.timings)
    with (out / "pairs.jsonl").open("w", encoding="utf-8") as fh:
        for rec in records:
            dump_pairs(rec.ir_id, [PatchPair.from_dict(p) for p in rec.pairs], fh)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    print(report.to_table(), end="")
    print(f"ran {len(records)} reports; outputs in {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    corpus = load_corpus(_require_file(args.corpus, "corpus"))
    cfg = load_config(_require_file(args.config, "config"))
    records = load_run_records(_require_file(args.records, "records"))
    results = build_ir_results(records, corpus, cfg)
    report = bucket_by_iterations(results, ks=(1, 5, 10), header=cfg.header())
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    print(report.to_table(), end="")
    return EXIT_OK


def _cmd_report(args) -> int:
    data = json.loads(_require_file(args.input, "report").read_text(encoding="utf-8"))
    if args.format == "json":
        print(json.dumps(data, sort_keys=True, indent=2))
        return EXIT_OK
    overall = MetricBlock(**_block_kwargs(data["overall"]))
    buckets = {k: MetricBlock(**_block_kwargs(v)) for k, v in data.get("buckets", {}).items()}
    print(EvalReport(overall=overall, buckets=buckets, header=data.get("header", {})).to_table(), end="")
    return EXIT_OK


def _block_kwargs(d: dict) -> dict:
    return {
        "ir_count": d.get("ir_count", 0),
        "match_line": d.get("match_line", 0.0),
        "match_trig": d.get("match_trig", 0.0),
        "match_fix": d.get("match_fix", 0.0),
        "acc_type": d.get("acc_type", 0.0),
        "acc_patch_type": d.get("acc_patch_type", 0.0),
        "trig_at": {int(k): v for k, v in d.get("trig_at", {}).items()},
        "fix_at": {int(k): v for k, v in d.get("fix_at", {}).items()},
    }


_COMMANDS = {
    "ingest": _cmd_ingest,
    "optimize": _cmd_optimize,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "kb":
            return _cmd_kb_ingest(args)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except IssuePatchError as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
