"""Patch-type prediction and joint insecure-code/patch pair generation.

The predictor chooses a repair strategy from a twelve-entry taxonomy, aided
by how often each (vulnerability type, patch type) pair co-occurred in
earlier predictions.  Generation first narrows the graph to the nodes that
reflect the developer's own coding (dropping third-party library internals),
then asks for ranked pairs in which code and patch are written together so
each member stays consistent with the other.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

from .errors import UsageError
from .evaluation import diff_code_pair
from .gateway import DEFAULT_LOOP_CAP, GENERATE_TEMPERATURE, Gateway
from .ingest import IssueReport
from .prompts import (
    PromptTemplate,
    ReplyFormatError,
    parse_pair_reply_items,
    parse_patch_type_reply,
    parse_selection_reply,
    render_prompt,
)
from .vtp import OpType, VtpGraph, VulType

logger = logging.getLogger(__name__)

PATCH_UNKNOWN = "PATCH-UNKNOWN"
DEFAULT_PAIRS_PER_CALL = 5

_FENCE = re.compile(r"```[a-zA-Z0-9_+\-]*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class PatchPair:
    """One ranked candidate: insecure code plus the patch that fixes it."""

    rank: int
    insecure_code: str
    patch: str
    vul_type: VulType
    patch_type: str

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not self.insecure_code.strip() or not self.patch.strip():
            raise ValueError("pair members must be nonempty")

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "insecure_code": self.insecure_code,
            "patch": self.patch,
            "vul_type": self.vul_type.to_dict(),
            "patch_type": self.patch_type,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchPair":
        return cls(
            rank=int(d["rank"]),
            insecure_code=str(d["insecure_code"]),
            patch=str(d["patch"]),
            vul_type=VulType.from_dict(d.get("vul_type", {})),
            patch_type=str(d.get("patch_type", PATCH_UNKNOWN)),
        )

    def patch_diff(self) -> str:
        """Unified-diff rendering of the patch against the insecure code."""
        return diff_code_pair(self.insecure_code, self.patch)


@dataclass(frozen=True)
class PatchTypePrediction:
    patch_type: str
    confidence_freq: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.confidence_freq <= 1:
            raise ValueError(f"confidence_freq out of range: {self.confidence_freq}")

    def to_dict(self) -> dict:
        return {"patch_type": self.patch_type, "confidence_freq": self.confidence_freq}


@dataclass
class CooccurrenceTable:
    """Counts of (vulnerability type, patch type) over predicted reports."""

    counts: dict[tuple[VulType, str], int] = field(default_factory=dict)
    predicted_ir_count: int = 0

    def record(self, vul_type: VulType, patch_type: str) -> None:
        key = (vul_type, patch_type)
        self.counts[key] = self.counts.get(key, 0) + 1
        self.predicted_ir_count += 1

    def copy(self) -> "CooccurrenceTable":
        return CooccurrenceTable(dict(self.counts), self.predicted_ir_count)

    def merge(self, other: "CooccurrenceTable") -> None:
        for key, n in other.counts.items():
            self.counts[key] = self.counts.get(key, 0) + n
        self.predicted_ir_count += other.predicted_ir_count

    def delta_since(self, base: "CooccurrenceTable") -> "CooccurrenceTable":
        delta = CooccurrenceTable()
        for key, n in self.counts.items():
            diff = n - base.counts.get(key, 0)
            if diff:
                delta.counts[key] = diff
        delta.predicted_ir_count = self.predicted_ir_count - base.predicted_ir_count
        return delta

    def to_dict(self) -> dict:
        return {
            "counts": {
                f"{v.cwe_id}|{v.error_type}|{p}": n
                for (v, p), n in sorted(
                    self.counts.items(), key=lambda kv: (kv[0][0].cwe_id, kv[0][0].error_type, kv[0][1])
                )
            },
            "predicted_ir_count": self.predicted_ir_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CooccurrenceTable":
        table = cls(predicted_ir_count=int(d.get("predicted_ir_count", 0)))
        for key, n in d.get("counts", {}).items():
            cwe, err, ptype = key.split("|", 2)
            table.counts[(VulType(cwe, err), ptype)] = int(n)
        return table


def freq(table: CooccurrenceTable, v: VulType, p: str) -> float:
    """Co-occurrence frequency: count(v, p) / predicted report count (0 when empty)."""
    if table.predicted_ir_count <= 0:
        return 0.0
    return table.counts.get((v, p), 0) / table.predicted_ir_count


def graph_vul_type(g: VtpGraph) -> VulType:
    """The graph's defining vulnerability type: the trigger node's, else the first node's."""
    for n in g.nodes:
        if n.op_type is OpType.VUL_TRIGGER:
            return n.vul_type
    return g.nodes[0].vul_type if g.nodes else VulType()


def predict_patch_type(
    g: VtpGraph,
    table: CooccurrenceTable,
    gateway: Gateway,
    template: PromptTemplate,
    ir: IssueReport,
    patch_types: list[str],
    theta: int = DEFAULT_LOOP_CAP,
    tag_prefix: str = "",
) -> PatchTypePrediction:
    """Predict a patch type and record the co-occurrence afterwards.

    The prompt embeds the taxonomy and the current frequencies for the
    graph's vulnerability type; counting happens after the prediction so the
    model only ever sees frequencies from prior reports.  A reply that is
    undecodable or outside the taxonomy after ``theta`` tries records
    PATCH-UNKNOWN, and the report still counts.
    """
    v = graph_vul_type(g)
    freq_lines = "\n".join(
        f"freq({v.cwe_id}/{v.error_type}, {p}) = {freq(table, v, p):.4f}"
        for p in patch_types
    )
    prompt = render_prompt(
        template,
        ir,
        g,
        extra={
            "patch_type_taxonomy": ", ".join(patch_types),
            "observed_frequencies": freq_lines,
        },
    )
    decoded: str | None = None
    tries = 0
    while tries < theta:
        tries += 1
        reply = gateway.ask(prompt, tag=f"{tag_prefix}predict")
        try:
            candidate = parse_patch_type_reply(reply)
        except ReplyFormatError:
            continue
        if candidate in patch_types:
            decoded = candidate
            break
        logger.warning("predicted patch type %r not in taxonomy", candidate)
    patch_type = decoded if decoded is not None else PATCH_UNKNOWN
    confidence = freq(table, v, patch_type)
    table.record(v, patch_type)
    return PatchTypePrediction(patch_type=patch_type, confidence_freq=confidence)


def _mentions_third_party(desc: str) -> bool:
    d = desc.lower()
    if "third-party" in d or "third party" in d:
        return True
    return ("librar" in d or "package" in d) and ("load" in d or "import" in d)


def select_developer_subgraph(
    g: VtpGraph,
    gateway: Gateway,
    template: PromptTemplate,
    ir: IssueReport,
    theta: int = DEFAULT_LOOP_CAP,
    tag_prefix: str = "",
) -> VtpGraph:
    """Induced subgraph of the nodes reflecting the developer's own coding.

    The model picks the node ids; an undecodable reply falls back to dropping
    nodes whose description mentions third-party library loading.  The
    trigger node is mandatory and gets re-added (with a warning) when the
    selection omits it.
    """
    prompt = render_prompt(
        template,
        ir,
        g,
        extra={
            "subtask": (
                "Select the node ids written by the project's own developers; "
                "drop operations internal to imported third-party libraries. "
                'Reply with JSON {"node_ids": [...]}.'
            )
        },
    )
    selection: list[str] | None = None
    tries = 0
    while tries < theta:
        tries += 1
        reply = gateway.ask(prompt, tag=f"{tag_prefix}select")
        try:
            selection = parse_selection_reply(reply)
            break
        except ReplyFormatError:
            continue
    if selection is None:
        selection = [n.node_id for n in g.nodes if not _mentions_third_party(n.op_desc)]
        logger.warning("selection undecodable, keeping %d fallback nodes", len(selection))

    known = set(g.node_ids())
    keep = {s for s in selection if s in known}
    dropped_unknown = set(selection) - keep
    if dropped_unknown:
        logger.warning("selection names unknown nodes: %s", sorted(dropped_unknown))
    for trigger in g.trigger_ids():
        if trigger not in keep:
            logger.warning("selection omitted trigger node %s; re-adding", trigger)
            keep.add(trigger)
    nodes = [n for n in g.nodes if n.node_id in keep]
    edges = [(a, b) for a, b in g.edges if a in keep and b in keep]
    return VtpGraph.build(nodes, edges)


@dataclass
class PairGenerationResult:
    pairs: list[PatchPair]
    shortfall: bool = False
    calls: int = 0


def generate_pairs(
    g_sel: VtpGraph,
    pred: PatchTypePrediction,
    k: int,
    gateway: Gateway,
    template: PromptTemplate,
    ir: IssueReport,
    theta: int = DEFAULT_LOOP_CAP,
    pairs_per_call: int = DEFAULT_PAIRS_PER_CALL,
    tag_prefix: str = "",
    no_joint: bool = False,
) -> PairGenerationResult:
    """Collect up to ``k`` ranked pairs within the call budget.

    Ranks follow arrival order; a reply item carrying ``revises_rank``
    replaces that earlier pair in place instead of appending.  The budget is
    ``theta * ceil(k / pairs_per_call)`` gateway calls; falling short returns
    the partial list with the shortfall flag set.  ``no_joint`` generates
    each member in two independent calls instead of one joint reply.
    """
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    budget = theta * math.ceil(k / pairs_per_call)
    pairs: list[PatchPair] = []
    calls = 0

    if no_joint:
        while len(pairs) < k and calls + 2 <= budget:
            code = _code_call(g_sel, pred, gateway, template, ir, f"{tag_prefix}gen_code")
            calls += 1
            if code is None:
                continue
            patch = _patch_call(
                g_sel, code, pred, gateway, template, ir, f"{tag_prefix}gen_patch"
            )
            calls += 1
            if patch is None:
                continue
            pairs.append(
                PatchPair(
                    rank=len(pairs) + 1,
                    insecure_code=code,
                    patch=patch,
                    vul_type=graph_vul_type(g_sel),
                    patch_type=pred.patch_type,
                )
            )
        return PairGenerationResult(pairs=pairs, shortfall=len(pairs) < k, calls=calls)

    prompt = render_prompt(
        template,
        ir,
        g_sel,
        extra={
            "subtask": (
                f"Jointly write up to {pairs_per_call} pairs of insecure code and the "
                f"patch fixing it, ranked best first, as a JSON list. Carry "
                f'"revises_rank" to amend an earlier pair.'
            ),
            "predicted_patch_type": pred.patch_type,
        },
    )
    while len(pairs) < k and calls < budget:
        calls += 1
        reply = gateway.ask(
            prompt, tag=f"{tag_prefix}generate", temperature=GENERATE_TEMPERATURE
        )
        try:
            items = parse_pair_reply_items(reply)
        except ReplyFormatError:
            logger.warning("pair reply undecodable (call %d)", calls)
            continue
        for pair, revises in items:
            if revises is not None and 1 <= revises <= len(pairs):
                pairs[revises - 1] = PatchPair(
                    rank=revises,
                    insecure_code=pair.insecure_code,
                    patch=pair.patch,
                    vul_type=pair.vul_type,
                    patch_type=pair.patch_type,
                )
            elif len(pairs) < k:
                pairs.append(
                    PatchPair(
                        rank=len(pairs) + 1,
                        insecure_code=pair.insecure_code,
                        patch=pair.patch,
                        vul_type=pair.vul_type,
                        patch_type=pair.patch_type,
                    )
                )
    return PairGenerationResult(pairs=pairs, shortfall=len(pairs) < k, calls=calls)


def _extract_code_block(reply: str) -> str | None:
    m = _FENCE.search(reply)
    text = m.group(1) if m else reply
    text = text.strip("\n")
    return text if text.strip() else None


def _code_call(g_sel, pred, gateway, template, ir, tag) -> str | None:
    prompt = render_prompt(
        template,
        ir,
        g_sel,
        extra={
            "subtask": "Write one insecure code example reflecting this path; reply with the code only.",
            "predicted_patch_type": pred.patch_type,
        },
    )
    return _extract_code_block(
        gateway.ask(prompt, tag=tag, temperature=GENERATE_TEMPERATURE)
    )


def _patch_call(g_sel, code, pred, gateway, template, ir, tag) -> str | None:
    # Independent-members mode: the patch call sees the generated code but
    # not the joint reply contract.
    prompt = render_prompt(
        template,
        ir,
        g_sel,
        extra={
            "subtask": "Write the patch fixing the insecure code below; reply with the code only.",
            "insecure_code": code,
            "predicted_patch_type": pred.patch_type,
        },
    )
    return _extract_code_block(
        gateway.ask(prompt, tag=tag, temperature=GENERATE_TEMPERATURE)
    )


def dump_pairs(ir_id: str, pairs: list[PatchPair], fh) -> None:
    """Write pair records (with their unified-diff rendering) as JSONL."""
    import json

    for p in pairs:
        record = p.to_dict()
        record["ir_id"] = ir_id
        record["patch_diff"] = p.patch_diff()
        fh.write(json.dumps(record, sort_keys=True) + "\n")
