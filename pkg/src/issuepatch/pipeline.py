"""End-to-end orchestration: extract, complete, correct, predict, generate.

One issue report flows through three stages: a bounded extract/complete loop
builds the triggering-path graph, knowledge-backed correction repairs
hallucinated nodes, and the generator predicts a patch type and emits ranked
code/patch pairs.  Per-report failures are isolated; a corpus run never
aborts on one bad report.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .autoprompt import (
    OptimizerError,
    TrainingSample,
    bootstrap_gt_vtp,
    exemplar_candidate_source,
    llm_candidate_source,
    optimize_prompt,
    save_history,
    score_extract_complete,
    score_generate_topk,
    score_vulcok,
)
from .config import PipelineConfig, load_error_types, load_patch_types
from .correction import CorrectionRunResult, run_correction
from .errors import IssuePatchError, UsageError
from .evaluation import (
    EvalReport,
    IrResult,
    MatchMetrics,
    bucket_by_iterations,
    match_metrics,
    parse_unified_diff,
    threshold_verdicts,
)
from .evaluation import diff_code_pair
from .gateway import Gateway, GatewayError, LoopAborted, run_bounded_loop
from .generation import (
    CooccurrenceTable,
    PATCH_UNKNOWN,
    PatchPair,
    PatchTypePrediction,
    generate_pairs,
    graph_vul_type,
    predict_patch_type,
    select_developer_subgraph,
)
from .ingest import IssueReport, issue_text
from .knowledge import KnowledgeStore
from .prompts import (
    PromptTemplate,
    ReplyFormatError,
    TEMPLATE_COMPLETE,
    TEMPLATE_EXTRACT,
    TEMPLATE_GENERATE,
    TEMPLATE_HAL_CORRECT,
    TEMPLATE_HAL_DETECT,
    TEMPLATE_IDS,
    TEMPLATE_TYPE_PREDICT,
    default_templates,
    parse_fill_mask_reply,
    parse_vtp_reply,
    render_fill_mask_prompt,
    render_prompt,
    save_template,
)
from .vtp import (
    CompletenessReport,
    GraphStructureError,
    OpNode,
    OpType,
    VtpGraph,
    VulType,
    canonical_serialize,
    check_completeness,
    mask_nodes,
)

logger = logging.getLogger(__name__)


class PipelineError(IssuePatchError):
    """A stage failed for one issue report."""


@dataclass
class RunRecord:
    """Everything one issue report produced on its way through the pipeline."""

    ir_id: str
    vtp_before: str | None = None
    vtp_after: str | None = None
    iterations: int = 1
    vtp_completed: bool = False
    corrections: list[dict] = field(default_factory=list)
    correction_iterations: int = 0
    correction_completed: bool = True
    predicted_vul_type: dict | None = None
    prediction: dict | None = None
    pairs: list[dict] = field(default_factory=list)
    pair_shortfall: bool = False
    error: str | None = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timings: bool = False) -> dict:
        d = {
            "ir_id": self.ir_id,
            "vtp_before": self.vtp_before,
            "vtp_after": self.vtp_after,
            "iterations": self.iterations,
            "vtp_completed": self.vtp_completed,
            "corrections": self.corrections,
            "correction_iterations": self.correction_iterations,
            "correction_completed": self.correction_completed,
            "predicted_vul_type": self.predicted_vul_type,
            "prediction": self.prediction,
            "pairs": self.pairs,
            "pair_shortfall": self.pair_shortfall,
            "error": self.error,
        }
        if include_timings:
            d["timings"] = self.timings
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def _render_deficits(report: CompletenessReport) -> str:
    parts = []
    if report.missing_op_info:
        parts.append(
            "missing info: "
            + "; ".join(f"{nid or '(graph)'}: {fld}" for nid, fld in report.missing_op_info)
        )
    if report.missing_intermediate:
        parts.append(
            "missing intermediate nodes between: "
            + "; ".join(f"{a}->{b}" for a, b in report.missing_intermediate)
        )
    if report.missing_transitions:
        parts.append(
            "missing transitions: "
            + "; ".join(f"{a or '(no root path)'}->{b}" for a, b in report.missing_transitions)
        )
    return " | ".join(parts)


def merge_graphs(base: VtpGraph, additions: VtpGraph) -> VtpGraph:
    """Merge a completion reply into the working graph.

    Nodes with known ids are replaced, new ids append, edges union; the
    merged graph must still validate.
    """
    by_id = {n.node_id: i for i, n in enumerate(base.nodes)}
    nodes = list(base.nodes)
    for n in additions.nodes:
        if n.node_id in by_id:
            nodes[by_id[n.node_id]] = n
        else:
            by_id[n.node_id] = len(nodes)
            nodes.append(n)
    edges = list(dict.fromkeys(list(base.edges) + list(additions.edges)))
    return VtpGraph.build(nodes, edges)


def _stub_graph(ir: IssueReport) -> VtpGraph:
    node = OpNode(
        node_id="op0",
        op_type=OpType.VUL_TRIGGER,
        op_desc="vulnerability described in the report",
        vul_type=ir.vul_type_label or VulType(),
    )
    return VtpGraph.build([node], [])


def generate_vtp(
    ir: IssueReport,
    cfg: PipelineConfig,
    templates: dict[str, PromptTemplate],
    gateway: Gateway,
    tag_prefix: str = "",
) -> tuple[VtpGraph, int, bool]:
    """Extract a graph, then loop check-and-complete under the cap.

    Returns ``(graph, iterations, completed)`` where iterations counts the
    check steps of the completion loop (the first one included) and completed
    says whether the graph passed the completeness check within the cap.
    """
    if cfg.has("no_extractor"):
        return _stub_graph(ir), 1, True
    include_vt = not cfg.has("no_vul_type")
    include_focus = not cfg.has("no_focus_list")

    extract_prompt = render_prompt(
        templates[TEMPLATE_EXTRACT],
        ir,
        include_vul_types=include_vt,
        include_focus=include_focus,
    )
    extracted: list[VtpGraph] = []

    def extract_step() -> bool:
        reply = gateway.ask(extract_prompt, tag=f"{tag_prefix}extract")
        try:
            extracted.append(parse_vtp_reply(reply))
            return True
        except ReplyFormatError:
            return False

    _, ok = run_bounded_loop(extract_step, cfg.theta)
    if not ok:
        raise PipelineError(f"{ir.id}: extraction undecodable after {cfg.theta} tries")
    graph = extracted[0]

    if cfg.has("no_completer"):
        return graph, 1, True

    state = {"graph": graph}

    def complete_step() -> bool:
        report = check_completeness(state["graph"])
        if report.complete:
            return True
        prompt = render_prompt(
            templates[TEMPLATE_COMPLETE],
            ir,
            state["graph"],
            extra={"completeness_deficits": _render_deficits(report)},
            include_vul_types=include_vt,
            include_focus=include_focus,
        )
        reply = gateway.ask(prompt, tag=f"{tag_prefix}complete")
        try:
            additions = parse_vtp_reply(reply)
        except ReplyFormatError:
            logger.warning("%s: completion reply undecodable", ir.id)
            return False
        try:
            state["graph"] = merge_graphs(state["graph"], additions)
        except GraphStructureError as e:
            logger.warning("%s: completion additions rejected: %s", ir.id, e)
        return False

    iterations, completed = run_bounded_loop(complete_step, cfg.theta)
    return state["graph"], iterations, completed


def run_ir(
    ir: IssueReport,
    cfg: PipelineConfig,
    store: KnowledgeStore,
    table: CooccurrenceTable,
    templates: dict[str, PromptTemplate],
    gateway: Gateway,
    patch_types: list[str] | None = None,
) -> RunRecord:
    """Run the three stages for one report; errors flag the record, never raise."""
    if patch_types is None:
        patch_types = load_patch_types(cfg)
    tag_prefix = f"{ir.id}:"
    rec = RunRecord(ir_id=ir.id)

    t0 = time.perf_counter()
    try:
        graph, rec.iterations, rec.vtp_completed = generate_vtp(
            ir, cfg, templates, gateway, tag_prefix
        )
    except (IssuePatchError, LoopAborted) as e:
        rec.iterations = cfg.theta
        rec.error = f"vtp: {e}"
        rec.timings["vtp"] = time.perf_counter() - t0
        return rec
    rec.vtp_before = canonical_serialize(graph)
    rec.timings["vtp"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if cfg.has("no_vulcok"):
        corrected = graph
        rec.correction_iterations = 0
    else:
        result: CorrectionRunResult = run_correction(
            graph,
            store,
            gateway,
            templates[TEMPLATE_HAL_DETECT],
            templates[TEMPLATE_HAL_CORRECT],
            ir,
            theta=cfg.theta,
            top_r=cfg.top_r,
            via_llm_queries=cfg.via_llm_queries,
            use_retrieval=not cfg.has("cok_plain"),
            tag_prefix=tag_prefix,
        )
        corrected = result.graph
        rec.corrections = [r.to_dict() for r in result.records]
        rec.correction_iterations = result.iterations
        rec.correction_completed = result.completed
        if result.error:
            rec.error = f"correction: {result.error}"
    rec.vtp_after = canonical_serialize(corrected)
    rec.predicted_vul_type = graph_vul_type(corrected).to_dict()
    rec.timings["correction"] = time.perf_counter() - t0
    if rec.error:
        return rec

    t0 = time.perf_counter()
    try:
        if cfg.has("no_patch_type"):
            prediction = PatchTypePrediction(PATCH_UNKNOWN, 0.0)
        else:
            prediction = predict_patch_type(
                corrected,
                table,
                gateway,
                templates[TEMPLATE_TYPE_PREDICT],
                ir,
                patch_types,
                theta=cfg.theta,
                tag_prefix=tag_prefix,
            )
    except (IssuePatchError, LoopAborted) as e:
        rec.error = f"prediction: {e}"
        rec.timings["prediction"] = time.perf_counter() - t0
        return rec
    rec.prediction = prediction.to_dict()
    rec.timings["prediction"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        g_sel = select_developer_subgraph(
            corrected,
            gateway,
            templates[TEMPLATE_GENERATE],
            ir,
            theta=cfg.theta,
            tag_prefix=tag_prefix,
        )
        result = generate_pairs(
            g_sel,
            prediction,
            cfg.k,
            gateway,
            templates[TEMPLATE_GENERATE],
            ir,
            theta=cfg.theta,
            pairs_per_call=cfg.pairs_per_call,
            tag_prefix=tag_prefix,
            no_joint=cfg.has("no_joint"),
        )
        rec.pairs = [p.to_dict() for p in result.pairs]
        rec.pair_shortfall = result.shortfall
    except (IssuePatchError, LoopAborted) as e:
        rec.error = f"generation: {e}"
    rec.timings["generation"] = time.perf_counter() - t0
    return rec


def build_ir_results(
    records: list[RunRecord], corpus: list[IssueReport], cfg: PipelineConfig
) -> list[IrResult]:
    """Join run records with ground truth into per-report metric inputs.

    Labeled reports get match metrics (and, under the threshold provider,
    derived verdicts); unlabeled reports contribute verdicts only when the
    dataset supplies them.
    """
    by_id = {ir.id: ir for ir in corpus}
    results = []
    for rec in sorted(records, key=lambda r: r.ir_id):
        ir = by_id.get(rec.ir_id)
        res = IrResult(ir_id=rec.ir_id, iterations=max(rec.iterations, 1))
        pairs = [PatchPair.from_dict(p) for p in rec.pairs]
        if ir is not None and ir.has_labels:
            gt = parse_unified_diff(diff_code_pair(ir.gt_insecure_code, ir.gt_patch))
            full = ir.gt_insecure_code if cfg.match_line_target == "full" else None
            res.matches = match_metrics(pairs, gt, full) if pairs else MatchMetrics(0, 0, 0)
            if cfg.verdict_provider == "threshold":
                res.verdicts = threshold_verdicts(rec.ir_id, pairs, gt, cfg.tau)
            elif ir.verdicts:
                res.verdicts = list(ir.verdicts)
        elif ir is not None and ir.verdicts:
            res.verdicts = list(ir.verdicts)
        if ir is not None and ir.vul_type_label is not None and rec.predicted_vul_type:
            res.predicted_vul_type = VulType.from_dict(rec.predicted_vul_type)
            res.gt_vul_type = ir.vul_type_label
        if rec.prediction:
            res.predicted_patch_type = rec.prediction.get("patch_type")
        results.append(res)
    return results


def run_corpus(
    corpus: list[IssueReport],
    cfg: PipelineConfig,
    store: KnowledgeStore | None = None,
    templates: dict[str, PromptTemplate] | None = None,
    table: CooccurrenceTable | None = None,
) -> tuple[list[RunRecord], EvalReport]:
    """Run every report (optionally concurrently) and aggregate the report.

    Each report predicts against a snapshot of the co-occurrence table taken
    at run start; deltas merge back in id order afterwards.  That keeps the
    output independent of scheduling, so runs are byte-reproducible at any
    concurrency level under a scripted backend.
    """
    store = store if store is not None else KnowledgeStore()
    error_types = load_error_types(cfg)
    patch_types = load_patch_types(cfg)
    if templates is None:
        templates = default_templates(error_types)
    gateway = Gateway(cfg.backend)
    base_table = table if table is not None else CooccurrenceTable()
    snapshot = base_table.copy()

    def work(ir: IssueReport) -> tuple[RunRecord, CooccurrenceTable]:
        local = snapshot.copy()
        rec = run_ir(ir, cfg, store, local, templates, gateway, patch_types)
        return rec, local.delta_since(snapshot)

    outcomes: list[tuple[RunRecord, CooccurrenceTable]] = []
    if cfg.concurrency > 1 and len(corpus) > 1:
        with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
            outcomes = list(pool.map(work, corpus))
    else:
        outcomes = [work(ir) for ir in corpus]

    outcomes.sort(key=lambda pair: pair[0].ir_id)
    records = []
    for rec, delta in outcomes:
        records.append(rec)
        base_table.merge(delta)

    if not corpus:
        logger.warning("empty evaluation set: report is empty")
    results = build_ir_results(records, corpus, cfg)
    report = bucket_by_iterations(results, ks=(1, 5, 10), header=cfg.header())
    return records, report


_SCORED_BY = {
    TEMPLATE_EXTRACT: "extract_complete",
    TEMPLATE_COMPLETE: "extract_complete",
    TEMPLATE_HAL_DETECT: "vulcok",
    TEMPLATE_HAL_CORRECT: "vulcok",
    TEMPLATE_TYPE_PREDICT: "generate",
    TEMPLATE_GENERATE: "generate",
}


def _make_scorer(
    tid: str,
    templates: dict[str, PromptTemplate],
    cfg: PipelineConfig,
    gateway: Gateway,
    store: KnowledgeStore,
    patch_types: list[str],
) -> Callable:
    """Scorer that runs the template's pipeline stage and scores the output."""
    task = _SCORED_BY[tid]

    def scorer(template: PromptTemplate, sample: TrainingSample, label: str):
        staged = dict(templates)
        staged[tid] = template
        prefix = f"{label}:{sample.ir.id}:"
        graph, _, _ = generate_vtp(sample.ir, cfg, staged, gateway, tag_prefix=prefix)

        if task == "extract_complete":
            masked, hidden = mask_nodes(
                graph, issue_text(sample.ir), cfg.mask_fraction, cfg.seed("mask")
            )
            predictions: list[str] = []
            if hidden:
                tokens = [tok for tok, _ in hidden]
                reply = gateway.ask(
                    render_fill_mask_prompt(masked, tokens), tag=f"{prefix}fillmask"
                )
                predictions = parse_fill_mask_reply(reply, tokens)
            return score_extract_complete(
                sample, graph, (hidden, predictions), cfg.distance_mode
            )

        if task == "vulcok":
            result = run_correction(
                graph,
                store,
                gateway,
                staged[TEMPLATE_HAL_DETECT],
                staged[TEMPLATE_HAL_CORRECT],
                sample.ir,
                theta=cfg.theta,
                top_r=cfg.top_r,
                via_llm_queries=cfg.via_llm_queries,
                tag_prefix=prefix,
            )
            if result.error:
                raise PipelineError(result.error)
            return score_vulcok(
                sample,
                result.retrieved,
                cfg.distance_mode,
                penalty=cfg.retrieval_penalty,
                expected=cfg.top_r,
            )

        local_table = CooccurrenceTable()
        pred = predict_patch_type(
            graph,
            local_table,
            gateway,
            staged[TEMPLATE_TYPE_PREDICT],
            sample.ir,
            patch_types,
            theta=cfg.theta,
            tag_prefix=prefix,
        )
        g_sel = select_developer_subgraph(
            graph, gateway, staged[TEMPLATE_GENERATE], sample.ir, cfg.theta, prefix
        )
        gen = generate_pairs(
            g_sel,
            pred,
            cfg.k,
            gateway,
            staged[TEMPLATE_GENERATE],
            sample.ir,
            theta=cfg.theta,
            pairs_per_call=cfg.pairs_per_call,
            tag_prefix=prefix,
            no_joint=cfg.has("no_joint"),
        )
        return score_generate_topk(sample, gen.pairs, cfg.distance_mode)

    return scorer


def optimize_all(
    prompt_reports: list[IssueReport],
    cfg: PipelineConfig,
    store: KnowledgeStore | None = None,
    templates: dict[str, PromptTemplate] | None = None,
    store_dir: str | Path | None = None,
) -> tuple[dict[str, PromptTemplate], dict[str, list[dict]]]:
    """Optimize every template against the prompt pool; persist per epoch.

    Labeled reports lacking a ground-truth path text are bootstrapped with
    one extraction pass over their insecure code (flagged unverified).  The
    no_autoprompt toggle returns the shipped templates untouched; icl_stub
    swaps focus mutation for fixed-exemplar insertion.
    """
    if not prompt_reports:
        raise UsageError("optimize_all needs a nonempty prompt set")
    store = store if store is not None else KnowledgeStore()
    error_types = load_error_types(cfg)
    patch_types = load_patch_types(cfg)
    if templates is None:
        templates = default_templates(error_types)
    if cfg.has("no_autoprompt"):
        logger.info("auto-prompting disabled: templates unchanged")
        return dict(templates), {}

    gateway = Gateway(cfg.backend)
    samples: list[TrainingSample] = []
    for ir in prompt_reports:
        if not ir.has_labels:
            logger.warning("%s: skipped for training (missing labels)", ir.id)
            continue
        gt_vtp = ir.gt_vtp_serialized
        if not gt_vtp:
            try:
                gt_vtp = bootstrap_gt_vtp(ir, gateway, templates[TEMPLATE_EXTRACT])
            except IssuePatchError as e:
                logger.warning("%s: bootstrap failed: %s", ir.id, e)
                continue
        samples.append(
            TrainingSample(
                ir=ir,
                gt_vtp_serialized=gt_vtp,
                gt_insecure_code=ir.gt_insecure_code,
                gt_patch=ir.gt_patch,
            )
        )
    if not samples:
        raise OptimizerError("no usable training samples in the prompt set")

    icl = cfg.has("icl_stub")
    candidate_source = exemplar_candidate_source() if icl else llm_candidate_source(gateway)
    templates = dict(templates)
    histories: dict[str, list[dict]] = {}
    for tid in TEMPLATE_IDS:
        scorer = _make_scorer(tid, templates, cfg, gateway, store, patch_types)
        on_epoch = None
        if store_dir is not None:
            on_epoch = lambda epoch, t, _tid=tid: save_template(t, store_dir, epoch=epoch)
        optimized, history = optimize_prompt(
            templates[tid],
            samples,
            cfg.epochs,
            scorer,
            candidate_source,
            early_stop=cfg.early_stop,
            icl_stub=icl,
            on_epoch=on_epoch,
        )
        templates[tid] = optimized
        histories[tid] = history
        if store_dir is not None:
            save_template(optimized, store_dir)
            save_history(history, Path(store_dir) / tid / "history.jsonl")
    return templates, histories


def dump_run_records(
    records: list[RunRecord], path: str | Path, include_timings: bool = False
) -> None:
    """Persist records as JSONL in id order.

    Timings stay out of the file by default so repeated runs of the same
    scripted corpus are byte-identical.
    """
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in sorted(records, key=lambda r: r.ir_id):
            fh.write(json.dumps(rec.to_dict(include_timings), sort_keys=True) + "\n")


def load_run_records(path: str | Path) -> list[RunRecord]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(RunRecord.from_dict(json.loads(line)))
    return records
