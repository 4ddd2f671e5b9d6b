"""Vulnerability-triggering-path (VTP) graphs.

A VTP describes how a vulnerability is reached: typed operation nodes
(source loading, function calls, tainted/secure data movement, the trigger
itself) connected by one-way prerequisite transitions.  This module owns the
graph type, its completeness check, a canonical text serialization, and the
node-masking helper used during prompt optimization.
"""

from __future__ import annotations

import heapq
import json
import random
import re
from dataclasses import dataclass, field, replace
from difflib import SequenceMatcher
from enum import Enum

from .errors import IssuePatchError, UsageError

CWE_UNKNOWN = "CWE-UNKNOWN"
ERR_UNKNOWN = "ERR-UNKNOWN"

_CWE_PATTERN = re.compile(r"^CWE-\d+$")

#: Default minimum length of a common substring usable as a mask anchor.
DEFAULT_MIN_MASK_ANCHOR = 8


class GraphStructureError(IssuePatchError):
    """The graph violates a structural invariant (dangling edge, self-loop, ...)."""


class CycleError(GraphStructureError):
    """Serialization found a cycle; ``cycle`` names one offending node sequence."""

    def __init__(self, cycle: list[str]):
        super().__init__(f"cycle detected: {' -> '.join(cycle)}")
        self.cycle = cycle


class OpType(str, Enum):
    """Kinds of operation nodes on a triggering path."""

    SRC_LOAD = "SrcLoad"
    FUNC_CALL = "FuncCall"
    VUL_DATA_TRANSMIT = "VulDataTransmit"
    SEC_DATA_TRANSMIT = "SecDataTransmit"
    VUL_TRIGGER = "VulTrigger"


@dataclass(frozen=True)
class VulType:
    """A vulnerability class: a CWE id plus a coarser error-type label.

    ``cwe_id`` must match ``CWE-<digits>`` or be the ``CWE-UNKNOWN`` sentinel.
    ``error_type`` is free-form here; membership in the configured taxonomy is
    enforced where the taxonomy is known (see :mod:`issuepatch.config`).
    """

    cwe_id: str = CWE_UNKNOWN
    error_type: str = ERR_UNKNOWN

    def __post_init__(self) -> None:
        if self.cwe_id != CWE_UNKNOWN and not _CWE_PATTERN.match(self.cwe_id):
            raise ValueError(f"bad cwe_id: {self.cwe_id!r}")

    @property
    def is_cwe_known(self) -> bool:
        return self.cwe_id != CWE_UNKNOWN

    @property
    def is_error_known(self) -> bool:
        return self.error_type != ERR_UNKNOWN

    def to_dict(self) -> dict:
        return {"cwe_id": self.cwe_id, "error_type": self.error_type}

    @classmethod
    def from_dict(cls, d: object) -> "VulType":
        if isinstance(d, str):
            # tolerate the short wire form "CWE-78"
            return cls(cwe_id=d or CWE_UNKNOWN)
        if not isinstance(d, dict):
            raise ValueError(f"bad vul_type value: {d!r}")
        return cls(
            cwe_id=str(d.get("cwe_id") or CWE_UNKNOWN),
            error_type=str(d.get("error_type") or ERR_UNKNOWN),
        )


@dataclass(frozen=True)
class OpNode:
    """One operation on the path: ``(op_type, op_desc, vul_type)`` plus an id."""

    node_id: str
    op_type: OpType
    op_desc: str
    vul_type: VulType = field(default_factory=VulType)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "op_type": self.op_type.value,
            "op_desc": self.op_desc,
            "vul_type": self.vul_type.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OpNode":
        try:
            op_type = OpType(d["op_type"])
        except (KeyError, ValueError) as e:
            raise ValueError(f"bad op_type in node {d.get('node_id')!r}") from e
        return cls(
            node_id=str(d["node_id"]),
            op_type=op_type,
            op_desc=str(d.get("op_desc", "")),
            vul_type=VulType.from_dict(d.get("vul_type", {})),
        )


@dataclass(frozen=True)
class VtpGraph:
    """Triggering-path graph: operation nodes plus one-way transition edges."""

    nodes: tuple[OpNode, ...] = ()
    edges: tuple[tuple[str, str], ...] = ()

    @classmethod
    def build(cls, nodes, edges) -> "VtpGraph":
        g = cls(nodes=tuple(nodes), edges=tuple((str(a), str(b)) for a, b in edges))
        g.validate()
        return g

    def validate(self) -> None:
        """Check structural invariants; raise :class:`GraphStructureError` otherwise.

        Structural validity covers node-id uniqueness, edge endpoints, and the
        no-self-loop rule.  Completeness (trigger node, connectivity) is a
        separate, softer notion: see :func:`check_completeness`.
        """
        seen: set[str] = set()
        for n in self.nodes:
            if not n.node_id:
                raise GraphStructureError("empty node_id")
            if n.node_id in seen:
                raise GraphStructureError(f"duplicate node_id {n.node_id!r}")
            seen.add(n.node_id)
        for a, b in self.edges:
            if a == b:
                raise GraphStructureError(f"self-loop on {a!r}")
            if a not in seen or b not in seen:
                raise GraphStructureError(f"dangling edge {a!r} -> {b!r}")

    def node_ids(self) -> list[str]:
        return [n.node_id for n in self.nodes]

    def node(self, node_id: str) -> OpNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def successors(self, node_id: str) -> list[str]:
        return [b for a, b in self.edges if a == node_id]

    def predecessors(self, node_id: str) -> list[str]:
        return [a for a, b in self.edges if b == node_id]

    def roots(self) -> list[str]:
        """Nodes with no incoming edge, in lexicographic id order."""
        targets = {b for _, b in self.edges}
        return sorted(n.node_id for n in self.nodes if n.node_id not in targets)

    def trigger_ids(self) -> list[str]:
        return [n.node_id for n in self.nodes if n.op_type is OpType.VUL_TRIGGER]

    def is_acyclic(self) -> bool:
        try:
            _topological_order(self)
        except CycleError:
            return False
        return True

    def with_node_replaced(self, node: OpNode) -> "VtpGraph":
        nodes = tuple(node if n.node_id == node.node_id else n for n in self.nodes)
        return replace(self, nodes=nodes)

    def to_dict(self) -> dict:
        return {
            "nodes": [n.to_dict() for n in self.nodes],
            "edges": [[a, b] for a, b in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "VtpGraph":
        nodes = [OpNode.from_dict(nd) for nd in d.get("nodes", [])]
        raw_edges = d.get("edges", [])
        edges = []
        for e in raw_edges:
            if isinstance(e, dict):
                edges.append((e["from"], e["to"]))
            else:
                a, b = e
                edges.append((a, b))
        return cls.build(nodes, edges)


@dataclass
class CompletenessReport:
    """Outcome of :func:`check_completeness`.

    ``missing_op_info`` entries with an empty node id flag graph-level
    deficits (no trigger node, no root node).
    """

    missing_op_info: list[tuple[str, str]] = field(default_factory=list)
    missing_intermediate: list[tuple[str, str]] = field(default_factory=list)
    missing_transitions: list[tuple[str, str]] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not (
            self.missing_op_info or self.missing_intermediate or self.missing_transitions
        )


def check_completeness(g: VtpGraph) -> CompletenessReport:
    """Report operation-level and transition-level deficits of a graph.

    Operation level: nodes with an empty description or sentinel vulnerability
    types, absence of a trigger node, absence of a start node with no
    predecessor.  Transition level: nodes with no path to the trigger, and
    nodes unreachable from every start node.
    """
    g.validate()
    report = CompletenessReport()
    for n in g.nodes:
        if not n.op_desc.strip():
            report.missing_op_info.append((n.node_id, "op_desc"))
        if not n.vul_type.is_cwe_known:
            report.missing_op_info.append((n.node_id, "cwe_id"))
        if not n.vul_type.is_error_known:
            report.missing_op_info.append((n.node_id, "error_type"))

    triggers = g.trigger_ids()
    if len(triggers) != 1:
        report.missing_op_info.append(("", "vul_trigger"))
    roots = g.roots()
    if g.nodes and not roots:
        report.missing_op_info.append(("", "source"))

    if triggers:
        # Nodes that cannot reach any trigger lack a transition toward it.
        reaches = _reverse_reachable(g, triggers)
        for n in g.nodes:
            if n.node_id not in reaches:
                report.missing_transitions.append((n.node_id, triggers[0]))
    if roots:
        reachable = _forward_reachable(g, roots)
        for n in g.nodes:
            if n.node_id not in reachable:
                # Empty from-id: no start node has a path to this node.
                report.missing_transitions.append(("", n.node_id))
    return report


def _forward_reachable(g: VtpGraph, starts: list[str]) -> set[str]:
    out: dict[str, list[str]] = {n.node_id: [] for n in g.nodes}
    for a, b in g.edges:
        out[a].append(b)
    seen = set(starts)
    stack = list(starts)
    while stack:
        for nxt in out[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _reverse_reachable(g: VtpGraph, targets: list[str]) -> set[str]:
    inc: dict[str, list[str]] = {n.node_id: [] for n in g.nodes}
    for a, b in g.edges:
        inc[b].append(a)
    seen = set(targets)
    stack = list(targets)
    while stack:
        for prv in inc[stack.pop()]:
            if prv not in seen:
                seen.add(prv)
                stack.append(prv)
    return seen


def _topological_order(g: VtpGraph) -> list[str]:
    """Kahn's algorithm with a lexicographic tie-break; raises on cycles."""
    indeg = {n.node_id: 0 for n in g.nodes}
    out: dict[str, list[str]] = {n.node_id: [] for n in g.nodes}
    for a, b in set(g.edges):
        indeg[b] += 1
        out[a].append(b)
    ready = [i for i, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for nxt in out[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) != len(g.nodes):
        remaining = sorted(i for i, d in indeg.items() if d > 0)
        raise CycleError(_find_cycle(out, remaining))
    return order


def _find_cycle(out: dict[str, list[str]], remaining: list[str]) -> list[str]:
    start = remaining[0]
    path, seen = [start], {start}
    cur = start
    while True:
        nxt = next(n for n in sorted(out[cur]) if n in set(remaining))
        if nxt in seen:
            return path[path.index(nxt):] + [nxt]
        path.append(nxt)
        seen.add(nxt)
        cur = nxt


def _escape_desc(text: str) -> str:
    return text.replace("\\", "\\\\").replace("|", "\\|").replace("\n", "\\n")


def canonical_serialize(g: VtpGraph) -> str:
    """Deterministic one-line-per-node linearization of a graph.

    Nodes appear in topological order (lexicographic node-id tie-break) as
    ``op_type|cwe|error|op_desc``; edge lines ``from->to`` follow, sorted.
    The same graph always yields byte-identical text; permuting the input
    node or edge lists does not change the output.
    """
    g.validate()
    order = _topological_order(g)
    by_id = {n.node_id: n for n in g.nodes}
    lines = []
    for nid in order:
        n = by_id[nid]
        lines.append(
            f"{n.op_type.value}|{n.vul_type.cwe_id}|{n.vul_type.error_type}|"
            f"{_escape_desc(n.op_desc)}"
        )
    lines.extend(sorted(f"{a}->{b}" for a, b in set(g.edges)))
    return "\n".join(lines)


def serialize_for_prompt(g: VtpGraph, include_vul_types: bool = True) -> str:
    """Graph text for prompt embedding; optionally blanks vulnerability types."""
    if include_vul_types:
        return canonical_serialize(g)
    blanked = VtpGraph(
        nodes=tuple(replace(n, vul_type=VulType()) for n in g.nodes),
        edges=g.edges,
    )
    return canonical_serialize(blanked)


def mask_nodes(
    g: VtpGraph,
    ir_text: str,
    fraction: float,
    seed: int,
    min_anchor: int = DEFAULT_MIN_MASK_ANCHOR,
    warnings: list | None = None,
) -> tuple[str, list[tuple[str, str]]]:
    """Mask the spans of ``ir_text`` that anchor randomly chosen nodes.

    Selects ``max(1, round(fraction * |nodes|))`` nodes under ``seed``, finds
    for each the longest common substring (length >= ``min_anchor``) between
    its description and the working text, and replaces that span with a
    ``[MASK_i]`` token.  Returns the masked text and the ``(token, original)``
    pairs; nodes with no qualifying span are skipped and reported through
    ``warnings`` when given.  Spans never overlap because each replacement is
    applied to the already-masked text.
    """
    if not g.nodes:
        raise UsageError("mask_nodes requires a nonempty graph")
    if not 0 < fraction <= 1:
        raise UsageError(f"mask fraction must be in (0, 1], got {fraction}")
    count = max(1, int(fraction * len(g.nodes) + 0.5))
    rng = random.Random(seed)
    chosen = rng.sample(sorted(g.node_ids()), count)

    # Chosen spans are blanked with NUL in the working copy, so later matches
    # can never overlap them (descriptions contain no NUL).
    working = list(ir_text)
    spans: list[tuple[int, int, str, str]] = []
    for nid in chosen:
        desc = g.node(nid).op_desc.replace("\x00", "")
        matcher = SequenceMatcher(None, desc, "".join(working), autojunk=False)
        m = matcher.find_longest_match(0, len(desc), 0, len(working))
        if m.size < min_anchor:
            if warnings is not None:
                warnings.append({"node_id": nid, "reason": "no_anchor"})
            continue
        token = f"[MASK_{len(spans)}]"
        spans.append((m.b, m.b + m.size, token, ir_text[m.b : m.b + m.size]))
        working[m.b : m.b + m.size] = "\x00" * m.size

    parts: list[str] = []
    last = 0
    for start, end, token, _original in sorted(spans):
        parts.append(ir_text[last:start])
        parts.append(token)
        last = end
    parts.append(ir_text[last:])
    hidden = [(token, original) for _s, _e, token, original in spans]
    return "".join(parts), hidden
