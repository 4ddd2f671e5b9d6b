"""Iterative prompt optimization over labeled samples.

Each epoch mutates the template's focus list three ways (insert, delete,
modify), scores the current template and the three candidates over every
training sample with the stage's score function, and adopts the lowest
total.  Scores are edit distances: zero means the model output equals the
ground truth.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable

from .distance import (  # noqa: F401  (re-exported: this module owns the distance surface)
    DISTANCE_MODES,
    NORMALIZED,
    RAW,
    distance,
    levenshtein,
    normalized_levenshtein,
)
from .errors import IssuePatchError, UsageError
from .gateway import Gateway
from .ingest import IssueReport, Segment
from .prompts import (
    ACTION_DELETE,
    ACTION_INSERT,
    ACTION_MODIFY,
    FocusEntry,
    PromptTemplate,
    mutate_focus,
    parse_vtp_reply,
    render_prompt,
)
from .vtp import VtpGraph, VulType, canonical_serialize

if TYPE_CHECKING:  # pragma: no cover
    from .generation import PatchPair
    from .knowledge import GoldenKnowledgeItem

logger = logging.getLogger(__name__)

TASK_EXTRACT_COMPLETE = "extract_complete"
TASK_VULCOK = "vulcok"
TASK_GENERATE = "generate"

DEFAULT_EPOCHS = 10
DEFAULT_EARLY_STOP = 3
DEFAULT_RETRIEVAL_PENALTY = 100.0

CANDIDATE_CURRENT = "current"
#: Tie-break order after the current template: insert beats modify beats delete.
CANDIDATE_ORDER = (CANDIDATE_CURRENT, ACTION_INSERT, ACTION_MODIFY, ACTION_DELETE)


class OptimizerError(IssuePatchError):
    """The optimizer could not score any sample."""


@dataclass(frozen=True)
class TrainingSample:
    """One labeled report: its ground-truth path text, insecure code and patch."""

    ir: IssueReport
    gt_vtp_serialized: str
    gt_insecure_code: str
    gt_patch: str

    def __post_init__(self) -> None:
        for name in ("gt_vtp_serialized", "gt_insecure_code", "gt_patch"):
            if not getattr(self, name).strip():
                raise ValueError(f"training sample {self.ir.id}: empty {name}")

    @classmethod
    def from_report(cls, ir: IssueReport) -> "TrainingSample":
        if not (ir.gt_insecure_code and ir.gt_patch and ir.gt_vtp_serialized):
            raise UsageError(f"{ir.id}: missing ground-truth labels for training")
        return cls(
            ir=ir,
            gt_vtp_serialized=ir.gt_vtp_serialized,
            gt_insecure_code=ir.gt_insecure_code,
            gt_patch=ir.gt_patch,
        )


@dataclass
class ScoreReport:
    """Score-function output: the total and its named parts (lower is better)."""

    task: str
    total: float
    parts: dict[str, float]
    mode: str = RAW

    @classmethod
    def build(cls, task: str, parts: dict[str, float], mode: str) -> "ScoreReport":
        return cls(task=task, total=sum(parts.values()), parts=dict(parts), mode=mode)


def score_extract_complete(
    sample: TrainingSample,
    predicted_vtp: VtpGraph,
    mask_outcome: tuple[list[tuple[str, str]], list[str]],
    mode: str = RAW,
) -> ScoreReport:
    """Matching score plus masking score for the extraction/completion stage.

    The matching part compares the predicted graph's canonical text with the
    ground-truth path text; the masking part sums the distances between each
    hidden span and its model reconstruction.
    """
    hidden, predictions = mask_outcome
    if len(hidden) != len(predictions):
        raise UsageError(
            f"mask lists misaligned: {len(hidden)} hidden vs {len(predictions)} predicted"
        )
    parts = {
        "score_match": distance(
            canonical_serialize(predicted_vtp), sample.gt_vtp_serialized, mode
        ),
        "score_mask": sum(
            distance(original, pred, mode)
            for (_tok, original), pred in zip(hidden, predictions)
        ),
    }
    return ScoreReport.build(TASK_EXTRACT_COMPLETE, parts, mode)


def score_vulcok(
    sample: TrainingSample,
    retrieved: "list[GoldenKnowledgeItem]",
    mode: str = RAW,
    penalty: float = DEFAULT_RETRIEVAL_PENALTY,
    expected: int = 1,
) -> ScoreReport:
    """Sum of distances between retrieved golden insecure code and the label.

    Empty retrieval scores the configured penalty once per expected item.
    """
    if not retrieved:
        parts = {"penalty": penalty * expected}
    else:
        parts = {
            f"kb:{item.kb_id}": distance(item.insecure_code, sample.gt_insecure_code, mode)
            for item in retrieved
        }
    return ScoreReport.build(TASK_VULCOK, parts, mode)


def score_generate(sample: TrainingSample, pair: "PatchPair", mode: str = RAW) -> ScoreReport:
    """Distance of the generated insecure code plus distance of the patch."""
    parts = {
        "code": distance(pair.insecure_code, sample.gt_insecure_code, mode),
        "patch": distance(pair.patch, sample.gt_patch, mode),
    }
    return ScoreReport.build(TASK_GENERATE, parts, mode)


def score_generate_topk(
    sample: TrainingSample, pairs: "list[PatchPair]", mode: str = RAW
) -> ScoreReport:
    """Best (minimum) pair score among the Top-K candidates."""
    if not pairs:
        raise UsageError("no candidate pairs to score")
    return min(
        (score_generate(sample, p, mode) for p in pairs), key=lambda r: r.total
    )


#: Scores one sample under one template; the tag labels the candidate being
#: evaluated so scripted backends can address replies per candidate.
Scorer = Callable[[PromptTemplate, TrainingSample, str], ScoreReport]

#: Produces the focus entry a mutation action should use, keyed off the
#: worst-scored sample of the epoch.
CandidateSource = Callable[[str, TrainingSample, PromptTemplate], FocusEntry]


def _sample_vul_type(sample: TrainingSample) -> VulType:
    return sample.ir.vul_type_label or VulType()


def llm_candidate_source(gateway: Gateway) -> CandidateSource:
    """Default source: one gateway call proposes a focus sentence.

    Deletion needs only the vulnerability-type key, so it makes no call.
    """

    def source(action: str, sample: TrainingSample, template: PromptTemplate) -> FocusEntry:
        vul_type = _sample_vul_type(sample)
        if action == ACTION_DELETE:
            return FocusEntry(vul_type=vul_type, focus="(delete)")
        prompt = (
            f"Propose one short focus sentence that would guide the analysis of\n"
            f"{vul_type.cwe_id} / {vul_type.error_type} vulnerabilities for the\n"
            f"task below. Reply with the sentence only.\n\n{template.task_definition}"
        )
        reply = gateway.ask(prompt, tag=f"focus:{action}:{template.template_id}")
        focus = next((l.strip() for l in reply.splitlines() if l.strip()), "")
        return FocusEntry(vul_type=vul_type, focus=focus or "review this vulnerability type")

    return source


def exemplar_candidate_source(max_chars: int = 160) -> CandidateSource:
    """In-context-learning stub: always insert a ground-truth exemplar."""

    def source(action: str, sample: TrainingSample, template: PromptTemplate) -> FocusEntry:
        excerpt = sample.gt_insecure_code.strip().replace("\n", " ")[:max_chars]
        return FocusEntry(vul_type=_sample_vul_type(sample), focus=f"example: {excerpt}")

    return source


def select_candidate(scores: dict[str, float]) -> str:
    """Argmin with the documented tie-break: current, then insert, modify, delete."""
    best = min(scores.values())
    for name in CANDIDATE_ORDER:
        if name in scores and scores[name] == best:
            return name
    return min(scores, key=scores.get)  # pragma: no cover


def optimize_prompt(
    t: PromptTemplate,
    samples: list[TrainingSample],
    epochs: int,
    scorer: Scorer,
    candidate_source: CandidateSource,
    early_stop: int | None = DEFAULT_EARLY_STOP,
    icl_stub: bool = False,
    on_epoch: Callable[[int, PromptTemplate], None] | None = None,
) -> tuple[PromptTemplate, list[dict]]:
    """Run the mutate-score-select loop and return the best template plus history.

    Because the current template competes every epoch, the adopted score
    never increases under a deterministic scorer.  ``icl_stub`` restricts the
    mutation set to exemplar insertion.
    """
    if epochs < 1:
        raise UsageError(f"epochs must be >= 1, got {epochs}")
    if not samples:
        raise UsageError("optimize_prompt needs at least one sample")

    history: list[dict] = []
    best_total = float("inf")
    stale = 0
    actions = (ACTION_INSERT,) if icl_stub else (ACTION_INSERT, ACTION_DELETE, ACTION_MODIFY)

    for epoch in range(epochs):
        skipped: list[dict] = []

        def evaluate(label: str, template: PromptTemplate) -> tuple[float, dict[str, float]]:
            total = 0.0
            per_sample: dict[str, float] = {}
            for sample in samples:
                try:
                    report = scorer(template, sample, label)
                except Exception as e:
                    skipped.append(
                        {"epoch": epoch, "candidate": label, "ir_id": sample.ir.id, "error": str(e)}
                    )
                    logger.warning("scorer failed (%s, %s): %s", label, sample.ir.id, e)
                    continue
                per_sample[sample.ir.id] = report.total
                total += report.total
            if not per_sample:
                return float("inf"), per_sample
            return total, per_sample

        current_total, per_sample = evaluate(CANDIDATE_CURRENT, t)
        if not per_sample:
            raise OptimizerError(f"epoch {epoch}: every sample failed to score")
        worst_id = max(per_sample, key=per_sample.get)
        worst = next(s for s in samples if s.ir.id == worst_id)

        candidates: dict[str, PromptTemplate] = {}
        for action in actions:
            item = candidate_source(action, worst, t)
            candidates[action] = t.with_focus(
                mutate_focus(list(t.focus_list), action, item)
            )

        scores = {CANDIDATE_CURRENT: current_total}
        for label, template in candidates.items():
            scores[label], _ = evaluate(label, template)

        chosen = select_candidate(scores)
        if chosen != CANDIDATE_CURRENT:
            t = PromptTemplate(
                template_id=t.template_id,
                task_definition=t.task_definition,
                schema_block=t.schema_block,
                focus_list=candidates[chosen].focus_list,
                version=t.version + 1,
            )
        chosen_total = scores[chosen]
        improved = chosen_total < best_total
        best_total = min(best_total, chosen_total)
        history.append(
            {
                "epoch": epoch,
                "scores": scores,
                "adopted": chosen,
                "worst_ir": worst_id,
                "template_version": t.version,
                "best_total": best_total,
                "skipped": skipped,
            }
        )
        if on_epoch is not None:
            on_epoch(epoch, t)
        stale = 0 if improved else stale + 1
        if early_stop is not None and stale >= early_stop:
            logger.info("early stop after %d non-improving epochs", stale)
            break
    return t, history


def bootstrap_gt_vtp(
    ir: IssueReport, gateway: Gateway, extract_template: PromptTemplate
) -> str:
    """One extraction pass over the labeled insecure code, flagged unverified.

    Used when a labeled report lacks a ground-truth path text; the result is
    a stand-in, not a verified label.
    """
    if not ir.gt_insecure_code:
        raise UsageError(f"{ir.id}: no insecure code to bootstrap from")
    pseudo = IssueReport(
        id=f"{ir.id}#gt",
        title=ir.title,
        body_segments=[Segment("code", ir.gt_insecure_code)],
    )
    reply = gateway.ask(
        render_prompt(extract_template, pseudo), tag=f"{ir.id}:bootstrap"
    )
    graph = parse_vtp_reply(reply)
    logger.warning("%s: ground-truth path bootstrapped from code (unverified)", ir.id)
    return canonical_serialize(graph)


def save_history(history: list[dict], path: str | Path) -> None:
    """Persist optimizer history as JSONL, one epoch per line."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
