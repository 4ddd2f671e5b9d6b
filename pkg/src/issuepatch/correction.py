"""Hallucination detection and correction over a triggering-path graph.

The corrector walks the graph breadth-first; per node it retrieves golden
knowledge, asks the model whether the node's types or description contradict
that knowledge, and applies model-proposed corrections backed by the
retrieved evidence.  A corrected graph earns one re-pass over the corrected
nodes, the whole run bounded by the loop cap.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace

from .errors import UsageError
from .gateway import DEFAULT_LOOP_CAP, Gateway, GatewayError, LoopAborted, run_bounded_loop
from .ingest import IssueReport
from .knowledge import DEFAULT_TOP_R, GoldenKnowledgeItem, KnowledgeStore, tokenize
from .prompts import (
    PromptTemplate,
    ReplyFormatError,
    VERDICT_CLEAN,
    parse_correction_reply,
    parse_query_reply,
    parse_verdict_reply,
    render_prompt,
)
from .vtp import GraphStructureError, OpNode, VtpGraph, VulType

logger = logging.getLogger(__name__)

KIND_TYPE_CORRECTED = "type_corrected"
KIND_DESC_CORRECTED = "desc_corrected"
KIND_NONE = "none"

DEFAULT_MAX_QUERIES = 8


@dataclass
class CorrectionRecord:
    """One attempted correction: what changed, backed by which knowledge items."""

    node_id: str
    kind: str
    before: dict = field(default_factory=dict)
    after: dict = field(default_factory=dict)
    evidence_kb_ids: list[str] = field(default_factory=list)
    note: str = ""

    def __post_init__(self) -> None:
        if self.kind != KIND_NONE:
            if self.before == self.after:
                raise ValueError("correction recorded without a change")
            if not self.evidence_kb_ids:
                raise ValueError("correction recorded without evidence")

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "kind": self.kind,
            "before": self.before,
            "after": self.after,
            "evidence_kb_ids": self.evidence_kb_ids,
            "note": self.note,
        }


@dataclass
class CorrectionRunResult:
    """Outcome of a full correction run over one graph."""

    graph: VtpGraph
    records: list[CorrectionRecord]
    iterations: int
    completed: bool
    retrieved: list[GoldenKnowledgeItem] = field(default_factory=list)
    error: str | None = None


def bfs_order(g: VtpGraph) -> list[str]:
    """Breadth-first node order from the no-incoming-edge path starts.

    A start node has no incoming edge and at least one outgoing edge;
    multiple starts enqueue in lexicographic order and neighbors visit in
    lexicographic order.  Nodes unreachable from every start (isolated nodes
    included) append at the end, flagged in the log.
    """
    g.validate()
    order: list[str] = []
    visited: set[str] = set()
    sources = {a for a, _ in g.edges}
    queue = deque(nid for nid in g.roots() if nid in sources)
    visited.update(queue)
    succ = {n.node_id: sorted(set(g.successors(n.node_id))) for n in g.nodes}
    while queue:
        nid = queue.popleft()
        order.append(nid)
        for nxt in succ[nid]:
            if nxt not in visited:
                visited.add(nxt)
                queue.append(nxt)
    unreachable = sorted(set(g.node_ids()) - visited)
    if unreachable:
        logger.warning("nodes unreachable from any root: %s", ", ".join(unreachable))
        order.extend(unreachable)
    return order


def generate_queries(
    node: OpNode,
    via_llm: bool = False,
    gateway: Gateway | None = None,
    max_queries: int = DEFAULT_MAX_QUERIES,
    tag_prefix: str = "",
    warnings: list | None = None,
) -> list[str]:
    """Retrieval queries for a node's golden knowledge.

    The deterministic fallback emits the CWE id plus keyword unigrams and
    adjacent-token bigrams from the description; the LLM route asks for a
    query list and falls back (with a record) when the reply is undecodable.
    """
    if via_llm:
        if gateway is None:
            raise UsageError("via_llm query generation needs a gateway")
        prompt = (
            "List up to {n} short search queries for looking up this operation in a\n"
            "vulnerability knowledge base. Reply with a JSON array of strings.\n\n"
            "cwe: {cwe}\nerror type: {err}\noperation: {desc}"
        ).format(
            n=max_queries,
            cwe=node.vul_type.cwe_id,
            err=node.vul_type.error_type,
            desc=node.op_desc,
        )
        reply = gateway.ask(prompt, tag=f"{tag_prefix}queries:{node.node_id}")
        try:
            return parse_query_reply(reply)[:max_queries]
        except ReplyFormatError:
            if warnings is not None:
                warnings.append({"node_id": node.node_id, "reason": "query_fallback"})
            logger.warning("%s: query reply undecodable, using fallback", node.node_id)

    queries: list[str] = []
    if node.vul_type.is_cwe_known:
        queries.append(node.vul_type.cwe_id)
    tokens = tokenize(node.op_desc)
    queries.extend(tokens)
    queries.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]))
    if not queries and not node.vul_type.is_cwe_known:
        queries.append(node.vul_type.cwe_id)
    deduped = list(dict.fromkeys(queries))
    return deduped[:max_queries]


def _render_knowledge(kb_hits: list[GoldenKnowledgeItem]) -> str:
    if not kb_hits:
        return "(none)"
    lines = []
    for item in kb_hits:
        lines.append(
            f"[{item.kb_id}] {item.cwe_id} {item.title}: {item.description}\n"
            f"    insecure code: {item.insecure_code}"
        )
    return "\n".join(lines)


def _decode_with_retries(gateway, prompt, tag, parser, theta):
    """Call-and-parse loop; returns the parsed value or None after theta tries."""
    holder: list = []

    def step() -> bool:
        reply = gateway.ask(prompt, tag=tag)
        try:
            holder.append(parser(reply))
            return True
        except ReplyFormatError:
            return False

    _, completed = run_bounded_loop(step, cap=theta)
    return holder[0] if completed else None


def detect_hallucination(
    node: OpNode,
    neighbors: list[OpNode],
    kb_hits: list[GoldenKnowledgeItem],
    gateway: Gateway,
    template: PromptTemplate,
    ir: IssueReport,
    theta: int = DEFAULT_LOOP_CAP,
    tag_prefix: str = "",
    warnings: list | None = None,
) -> str:
    """One detection verdict for a node, judged with its connected operations.

    An undecodable verdict after ``theta`` tries fails open to clean, with a
    warning record: a forced correction is riskier than a missed one.
    """
    context = VtpGraph.build(
        [node] + neighbors, [(node.node_id, nb.node_id) for nb in neighbors]
    )
    prompt = render_prompt(
        template,
        ir,
        context,
        extra={
            "highlighted_node": node.node_id,
            "retrieved_knowledge": _render_knowledge(kb_hits),
        },
    )
    verdict = _decode_with_retries(
        gateway, prompt, f"{tag_prefix}detect:{node.node_id}", parse_verdict_reply, theta
    )
    if verdict is None:
        if warnings is not None:
            warnings.append({"node_id": node.node_id, "reason": "undecodable_verdict"})
        logger.warning("%s: undecodable verdict, treating as clean", node.node_id)
        return VERDICT_CLEAN
    return verdict


def _apply_type_correction(
    g: VtpGraph, node_id: str, payload: dict
) -> tuple[VtpGraph, dict, dict]:
    node = g.node(node_id)
    new_type = VulType.from_dict(payload["vul_type"])
    before = {"node": node.to_dict()}
    g = g.with_node_replaced(replace(node, vul_type=new_type))
    connected = []
    for entry in payload.get("connected", []):
        cid = str(entry.get("node_id", ""))
        try:
            cnode = g.node(cid)
        except KeyError:
            logger.warning("type correction names unknown node %s", cid)
            continue
        before.setdefault("connected", []).append(cnode.to_dict())
        g = g.with_node_replaced(
            replace(cnode, vul_type=VulType.from_dict(entry["vul_type"]))
        )
        connected.append(g.node(cid).to_dict())
    after = {"node": g.node(node_id).to_dict()}
    if connected:
        after["connected"] = connected
    return g, before, after


def _apply_desc_correction(
    g: VtpGraph, node_id: str, payload: dict
) -> tuple[VtpGraph, dict, dict]:
    node = g.node(node_id)
    before = {"node": node.to_dict(), "successors": sorted(g.successors(node_id))}
    g = g.with_node_replaced(replace(node, op_desc=str(payload["op_desc"])))
    if "successors" in payload:
        known = set(g.node_ids())
        new_succ = []
        for s in payload["successors"]:
            s = str(s)
            if s in known and s != node_id:
                new_succ.append(s)
            else:
                logger.warning("desc correction drops unknown successor %s", s)
        edges = [e for e in g.edges if e[0] != node_id]
        edges += [(node_id, s) for s in dict.fromkeys(new_succ)]
        g = VtpGraph(nodes=g.nodes, edges=tuple(edges))
    after = {"node": g.node(node_id).to_dict(), "successors": sorted(g.successors(node_id))}
    return g, before, after


def correct_node(
    g: VtpGraph,
    node_id: str,
    verdict: str,
    kb_hits: list[GoldenKnowledgeItem],
    gateway: Gateway,
    template: PromptTemplate,
    ir: IssueReport,
    theta: int = DEFAULT_LOOP_CAP,
    tag_prefix: str = "",
) -> tuple[VtpGraph, CorrectionRecord]:
    """Apply one model-proposed correction, revalidating the result.

    Type verdicts replace the node's (and optionally its connected nodes')
    vulnerability types; description verdicts rewrite the description and may
    replace the node's outgoing transitions.  A correction with no knowledge
    evidence, an undecodable reply, or a structurally invalid result leaves
    the graph unchanged and records kind "none" with the failure note.
    """
    if verdict == VERDICT_CLEAN:
        raise UsageError("correct_node called with a clean verdict")
    evidence = [item.kb_id for item in kb_hits]
    if not evidence:
        return g, CorrectionRecord(node_id=node_id, kind=KIND_NONE, note="no_evidence")

    prompt = render_prompt(
        template,
        ir,
        g,
        extra={
            "highlighted_node": node_id,
            "verdict": verdict,
            "retrieved_knowledge": _render_knowledge(kb_hits),
        },
    )
    payload = _decode_with_retries(
        gateway, prompt, f"{tag_prefix}correct:{node_id}", parse_correction_reply, theta
    )
    if payload is None:
        return g, CorrectionRecord(node_id=node_id, kind=KIND_NONE, note="undecodable")

    try:
        if payload["kind"] == "type":
            new_g, before, after = _apply_type_correction(g, node_id, payload)
            kind = KIND_TYPE_CORRECTED
        else:
            new_g, before, after = _apply_desc_correction(g, node_id, payload)
            kind = KIND_DESC_CORRECTED
        new_g.validate()
        if not new_g.is_acyclic():
            raise GraphStructureError("correction introduced a cycle")
    except (GraphStructureError, KeyError, TypeError, ValueError) as e:
        logger.warning("%s: correction rejected: %s", node_id, e)
        return g, CorrectionRecord(node_id=node_id, kind=KIND_NONE, note=f"invalid_result: {e}")

    if before == after:
        return g, CorrectionRecord(node_id=node_id, kind=KIND_NONE, note="no_change")
    return new_g, CorrectionRecord(
        node_id=node_id, kind=kind, before=before, after=after, evidence_kb_ids=evidence
    )


def run_correction(
    g: VtpGraph,
    store: KnowledgeStore,
    gateway: Gateway,
    detect_template: PromptTemplate,
    correct_template: PromptTemplate,
    ir: IssueReport,
    theta: int = DEFAULT_LOOP_CAP,
    top_r: int = DEFAULT_TOP_R,
    via_llm_queries: bool = False,
    use_retrieval: bool = True,
    tag_prefix: str = "",
    warnings: list | None = None,
) -> CorrectionRunResult:
    """Walk the graph breadth-first and correct hallucinated nodes.

    Per node: retrieval queries, top-R golden hits, a detection verdict, and
    a correction when the verdict demands one.  Any corrected node earns a
    re-pass; passes are bounded by ``theta``.  ``use_retrieval=False`` is the
    plain-correction mode (no knowledge lookups, so corrections carry no
    evidence and are rejected).  Gateway exhaustion returns the partial
    result with the error flagged.
    """
    g.validate()
    records: list[CorrectionRecord] = []
    retrieved: list[GoldenKnowledgeItem] = []
    pending = bfs_order(g)
    iterations = 0
    completed = False
    error: str | None = None

    try:
        while iterations < theta:
            iterations += 1
            corrected: list[str] = []
            for node_id in pending:
                node = g.node(node_id)
                neighbors = [g.node(s) for s in sorted(set(g.successors(node_id)))]
                hits: list[GoldenKnowledgeItem] = []
                if use_retrieval:
                    queries = generate_queries(
                        node,
                        via_llm=via_llm_queries,
                        gateway=gateway,
                        tag_prefix=tag_prefix,
                        warnings=warnings,
                    )
                    hits = store.search(queries, top_r=top_r)
                    retrieved.extend(hits)
                verdict = detect_hallucination(
                    node,
                    neighbors,
                    hits,
                    gateway=gateway,
                    template=detect_template,
                    ir=ir,
                    theta=theta,
                    tag_prefix=tag_prefix,
                    warnings=warnings,
                )
                if verdict == VERDICT_CLEAN:
                    continue
                g, record = correct_node(
                    g,
                    node_id,
                    verdict,
                    hits,
                    gateway=gateway,
                    template=correct_template,
                    ir=ir,
                    theta=theta,
                    tag_prefix=tag_prefix,
                )
                records.append(record)
                if record.kind != KIND_NONE:
                    corrected.append(node_id)
            if not corrected:
                completed = True
                break
            order = bfs_order(g)
            pending = [nid for nid in order if nid in set(corrected)]
    except (GatewayError, LoopAborted) as e:
        error = str(e)
        logger.warning("correction run aborted: %s", e)

    return CorrectionRunResult(
        graph=g,
        records=records,
        iterations=iterations,
        completed=completed and error is None,
        retrieved=retrieved,
        error=error,
    )
