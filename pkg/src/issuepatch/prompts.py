"""Prompt templates, focus lists, and structured-reply parsing.

Every prompt has three blocks: a task definition, the details of the
triggering-path description (schema, current graph, tagged issue text), and
a focus list of per-vulnerability-type guidance sentences.  Replies are
requested as JSON so the loops and score functions can decode them; the
parsers here tolerate surrounding prose and code fences.

Reply grammar (JSON embedded anywhere in the reply):
  graph        {"nodes": [...], "edges": [["a","b"], ...]}
  verdict      {"verdict": "type_hallucination" | "desc_hallucination" | "clean"}
  correction   {"kind": "type", "vul_type": {...}, "connected": [{"node_id":..., "vul_type":...}]}
               {"kind": "desc", "op_desc": "...", "successors": ["id", ...]}
  queries      ["query", ...]
  selection    {"node_ids": ["id", ...]}
  patch type   {"patch_type": "..."} or the bare type name
  pairs        [{"insecure_code":..., "patch":..., "vul_type":..., "patch_type":...,
                 "revises_rank": <optional int>}, ...]
  fill-mask    {"[MASK_0]": "text", ...} or ["text", ...] aligned with the tokens
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

from .errors import IssuePatchError, UsageError
from .ingest import IssueReport, issue_text
from .vtp import VtpGraph, VulType, serialize_for_prompt

if TYPE_CHECKING:  # pragma: no cover
    from .generation import PatchPair

logger = logging.getLogger(__name__)

TEMPLATE_EXTRACT = "extract"
TEMPLATE_COMPLETE = "complete"
TEMPLATE_HAL_DETECT = "halDetect"
TEMPLATE_HAL_CORRECT = "halCorrect"
TEMPLATE_TYPE_PREDICT = "typePredict"
TEMPLATE_GENERATE = "generate"
TEMPLATE_IDS = (
    TEMPLATE_EXTRACT,
    TEMPLATE_COMPLETE,
    TEMPLATE_HAL_DETECT,
    TEMPLATE_HAL_CORRECT,
    TEMPLATE_TYPE_PREDICT,
    TEMPLATE_GENERATE,
)

VERDICT_TYPE = "type_hallucination"
VERDICT_DESC = "desc_hallucination"
VERDICT_CLEAN = "clean"
VERDICTS = (VERDICT_TYPE, VERDICT_DESC, VERDICT_CLEAN)

ACTION_INSERT = "insert"
ACTION_DELETE = "delete"
ACTION_MODIFY = "modify"
FOCUS_ACTIONS = (ACTION_INSERT, ACTION_DELETE, ACTION_MODIFY)


class ReplyFormatError(IssuePatchError):
    """The LLM reply carried no decodable payload; keeps the raw reply for retries."""

    def __init__(self, reason: str, raw_reply: str):
        super().__init__(reason)
        self.raw_reply = raw_reply


@dataclass(frozen=True)
class FocusEntry:
    """One guidance sentence keyed by vulnerability type."""

    vul_type: VulType
    focus: str

    def __post_init__(self) -> None:
        if not self.focus.strip():
            raise ValueError("focus text empty")

    def to_dict(self) -> dict:
        return {"vul_type": self.vul_type.to_dict(), "focus": self.focus}

    @classmethod
    def from_dict(cls, d: dict) -> "FocusEntry":
        return cls(vul_type=VulType.from_dict(d["vul_type"]), focus=str(d["focus"]))


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    task_definition: str
    schema_block: str
    focus_list: tuple[FocusEntry, ...] = ()
    version: int = 0

    def __post_init__(self) -> None:
        if self.template_id not in TEMPLATE_IDS:
            raise ValueError(f"unknown template_id {self.template_id!r}")
        if not self.task_definition.strip():
            raise ValueError("task_definition empty")

    def with_focus(self, focus_list) -> "PromptTemplate":
        return replace(self, focus_list=tuple(focus_list))

    def to_dict(self) -> dict:
        return {
            "template_id": self.template_id,
            "task_definition": self.task_definition,
            "schema_block": self.schema_block,
            "focus_list": [f.to_dict() for f in self.focus_list],
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptTemplate":
        return cls(
            template_id=str(d["template_id"]),
            task_definition=str(d["task_definition"]),
            schema_block=str(d["schema_block"]),
            focus_list=tuple(FocusEntry.from_dict(f) for f in d.get("focus_list", [])),
            version=int(d.get("version", 0)),
        )


def build_schema_block(error_types: list[str]) -> str:
    """The shared description of graph nodes, edges and vulnerability types."""
    return "\n".join(
        [
            "A triggering-path graph is a JSON object:",
            '  {"nodes": [...], "edges": [["from_id", "to_id"], ...]}',
            "Each node is:",
            '  {"node_id": str, "op_type": str, "op_desc": str,',
            '   "vul_type": {"cwe_id": "CWE-<n>" or "CWE-UNKNOWN",',
            '                "error_type": one of the error types below or "ERR-UNKNOWN"}}',
            "Operation types:",
            "  SrcLoad        - the program loads attacker-reachable source data",
            "                   (third-party libraries, initialized variables).",
            "  FuncCall       - a function call that takes part in reaching the flaw.",
            "  VulDataTransmit - tainted data moves one step closer to a sink.",
            "  SecDataTransmit - data moves but stays harmless.",
            "  VulTrigger     - the single end node where the vulnerability fires.",
            "Edges are one-way transitions: the from-node is a prerequisite of the",
            "to-node.",
            "Error types: " + ", ".join(error_types) + ".",
        ]
    )


_TASK_DEFINITIONS = {
    TEMPLATE_EXTRACT: (
        "Read the issue report below and extract the path by which the described\n"
        "vulnerability is triggered. Reply with exactly one JSON graph object\n"
        "following the schema; include a vulnerability type on every node."
    ),
    TEMPLATE_COMPLETE: (
        "The triggering-path graph below is incomplete: some nodes lack a\n"
        "description or a vulnerability type, some intermediate operations are\n"
        "missing, or some nodes cannot reach the trigger node. Reply with one\n"
        "JSON graph object holding corrected or new nodes plus new edges; it\n"
        "will be merged into the current graph."
    ),
    TEMPLATE_HAL_DETECT: (
        "Judge whether the highlighted operation node contradicts the retrieved\n"
        "knowledge or its connected operations. Reply with JSON\n"
        '{"verdict": "type_hallucination" | "desc_hallucination" | "clean"}:\n'
        "type_hallucination when the CWE or error type is wrong,\n"
        "desc_hallucination when the operation description is wrong."
    ),
    TEMPLATE_HAL_CORRECT: (
        "Correct the highlighted operation node using the retrieved knowledge.\n"
        'For a wrong type reply {"kind": "type", "vul_type": {...},\n'
        ' "connected": [{"node_id": ..., "vul_type": {...}}, ...]}.\n'
        'For a wrong description reply {"kind": "desc", "op_desc": "...",\n'
        ' "successors": ["node_id", ...]} where successors replace the node\'s\n'
        "outgoing transitions."
    ),
    TEMPLATE_TYPE_PREDICT: (
        "Choose the patch type most likely to fix the vulnerability on this\n"
        "triggering path. Pick one entry from the patch-type taxonomy in the\n"
        'context and reply with JSON {"patch_type": "..."}.'
    ),
    TEMPLATE_GENERATE: (
        "Work with the developer-facing part of the triggering path. When asked\n"
        "to select nodes, reply with JSON {\"node_ids\": [...]}. When asked to\n"
        "generate, write pairs of insecure code and the patch that fixes it,\n"
        "consistent with each other and with the predicted patch type; reply\n"
        "with a JSON list of {\"insecure_code\", \"patch\", \"vul_type\",\n"
        "\"patch_type\"} objects, optionally carrying \"revises_rank\" to amend\n"
        "an earlier pair."
    ),
}


def default_templates(error_types: list[str]) -> dict[str, PromptTemplate]:
    """The six shipped templates; focus lists start empty and are learned."""
    schema = build_schema_block(error_types)
    return {
        tid: PromptTemplate(template_id=tid, task_definition=_TASK_DEFINITIONS[tid], schema_block=schema)
        for tid in TEMPLATE_IDS
    }


def _focus_matches(entry: FocusEntry, g: VtpGraph) -> bool:
    cwes = {n.vul_type.cwe_id for n in g.nodes if n.vul_type.is_cwe_known}
    errs = {n.vul_type.error_type for n in g.nodes if n.vul_type.is_error_known}
    if entry.vul_type.is_cwe_known:
        return entry.vul_type.cwe_id in cwes
    return entry.vul_type.is_error_known and entry.vul_type.error_type in errs


def render_prompt(
    t: PromptTemplate,
    ir: IssueReport,
    g: VtpGraph | None = None,
    extra: dict[str, str] | None = None,
    include_vul_types: bool = True,
    include_focus: bool = True,
) -> str:
    """Render the three prompt blocks deterministically.

    The focus list is filtered to the vulnerability types present in ``g``
    (all entries when no graph is given); an empty list renders an explicit
    "none" marker.  Templates other than ``extract`` require a graph.
    """
    if g is None and t.template_id != TEMPLATE_EXTRACT:
        raise UsageError(f"template {t.template_id!r} requires a graph")
    lines = ["## Task", t.task_definition, "", "## Details of the triggering-path description", t.schema_block]
    if g is not None:
        lines += ["", "### Current graph", serialize_for_prompt(g, include_vul_types) or "(empty)"]
    lines += ["", "### Issue report", issue_text(ir)]
    if extra:
        lines += ["", "### Context"]
        for key in sorted(extra):
            lines.append(f"{key}: {extra[key]}")
    if include_focus:
        lines += ["", "## Focus list"]
        entries = [e for e in t.focus_list if g is None or _focus_matches(e, g)]
        if entries:
            for e in entries:
                lines.append(f"- ({e.vul_type.cwe_id} / {e.vul_type.error_type}) {e.focus}")
        else:
            lines.append("- none")
    return "\n".join(lines)


def render_fill_mask_prompt(masked_text: str, tokens: list[str]) -> str:
    """Dedicated instruction asking the model to restore masked spans."""
    return "\n".join(
        [
            "## Task",
            "The issue report below had some spans replaced by mask tokens.",
            "Reconstruct the original text of every span. Reply with JSON mapping",
            "each token to its text: " + json.dumps({t: "..." for t in tokens}),
            "",
            "### Masked issue report",
            masked_text,
        ]
    )


def mutate_focus(
    fl: list[FocusEntry],
    action: str,
    item: FocusEntry,
    warnings: list | None = None,
) -> list[FocusEntry]:
    """Insert, delete, or modify one focus entry; keys are vulnerability types.

    Insert replaces an existing entry with the same type (noted); delete and
    modify of an absent type are no-ops with a warning record.  Order stays
    stable and no duplicate type ever appears.
    """
    if action not in FOCUS_ACTIONS:
        raise UsageError(f"unknown focus action {action!r}")

    def warn(reason: str) -> None:
        record = {"action": action, "vul_type": item.vul_type.to_dict(), "reason": reason}
        logger.warning("focus %s: %s for %s", action, reason, item.vul_type)
        if warnings is not None:
            warnings.append(record)

    out = list(fl)
    idx = next((i for i, e in enumerate(out) if e.vul_type == item.vul_type), None)
    if action == ACTION_INSERT:
        if idx is None:
            out.append(item)
        else:
            warn("replaced_duplicate")
            out[idx] = item
    elif action == ACTION_DELETE:
        if idx is None:
            warn("absent")
        else:
            del out[idx]
    else:  # modify
        if idx is None:
            warn("absent")
        else:
            out[idx] = item
    return out


# --------------------------------------------------------------------------
# Reply parsing
# --------------------------------------------------------------------------


def _iter_json_values(reply: str, opener: str):
    decoder = json.JSONDecoder()
    pos = 0
    while True:
        start = reply.find(opener, pos)
        if start == -1:
            return
        try:
            value, end = decoder.raw_decode(reply, start)
        except json.JSONDecodeError:
            pos = start + 1
            continue
        yield value
        pos = end


def parse_vtp_reply(reply: str) -> VtpGraph:
    """Extract the first well-formed graph JSON object embedded in a reply."""
    for value in _iter_json_values(reply, "{"):
        if isinstance(value, dict) and "nodes" in value:
            try:
                return VtpGraph.from_dict(value)
            except (IssuePatchError, KeyError, TypeError, ValueError) as e:
                logger.debug("graph candidate rejected: %s", e)
    raise ReplyFormatError("no parseable graph in reply", reply)


def parse_pair_reply_items(reply: str) -> list[tuple["PatchPair", int | None]]:
    """Decode a JSON list of code/patch pairs plus optional revision targets.

    Each item needs nonempty ``insecure_code`` and ``patch`` plus
    ``vul_type`` and ``patch_type``; a missing or empty field raises a decode
    error naming it.  The second tuple member is the ``revises_rank`` marker
    (None for a fresh pair).
    """
    from .generation import PatchPair

    for value in _iter_json_values(reply, "["):
        if not isinstance(value, list):
            continue
        if value and not all(isinstance(x, dict) for x in value):
            continue
        out = []
        for i, item in enumerate(value):
            for fld in ("insecure_code", "patch", "vul_type", "patch_type"):
                if fld not in item:
                    raise ReplyFormatError(f"pair {i}: missing field {fld!r}", reply)
            insecure = str(item["insecure_code"])
            patch = str(item["patch"])
            if not insecure.strip():
                raise ReplyFormatError(f"pair {i}: empty field 'insecure_code'", reply)
            if not patch.strip():
                raise ReplyFormatError(f"pair {i}: empty field 'patch'", reply)
            revises = item.get("revises_rank")
            pair = PatchPair(
                rank=i + 1,
                insecure_code=insecure,
                patch=patch,
                vul_type=VulType.from_dict(item["vul_type"]),
                patch_type=str(item["patch_type"]),
            )
            out.append((pair, int(revises) if revises is not None else None))
        return out
    raise ReplyFormatError("no parseable pair list in reply", reply)


def parse_pair_reply(reply: str) -> list["PatchPair"]:
    """Pairs only, ranks following reply order."""
    return [pair for pair, _ in parse_pair_reply_items(reply)]


def parse_verdict_reply(reply: str) -> str:
    """Decode a hallucination-detection verdict."""
    for value in _iter_json_values(reply, "{"):
        if isinstance(value, dict) and isinstance(value.get("verdict"), str):
            verdict = value["verdict"].strip()
            if verdict in VERDICTS:
                return verdict
    bare = reply.strip().strip("\"'`")
    if bare in VERDICTS:
        return bare
    raise ReplyFormatError("no verdict in reply", reply)


def parse_correction_reply(reply: str) -> dict:
    """Decode a correction: kind "type" (new types) or "desc" (new description)."""
    for value in _iter_json_values(reply, "{"):
        if not isinstance(value, dict):
            continue
        kind = value.get("kind")
        if kind == "type" and "vul_type" in value:
            return value
        if kind == "desc" and "op_desc" in value:
            return value
    raise ReplyFormatError("no correction payload in reply", reply)


def parse_query_reply(reply: str) -> list[str]:
    """Decode a JSON array of retrieval query strings."""
    for value in _iter_json_values(reply, "["):
        if isinstance(value, list) and all(isinstance(x, str) for x in value):
            queries = [q.strip() for q in value if q.strip()]
            if queries:
                return queries
    raise ReplyFormatError("no query list in reply", reply)


def parse_selection_reply(reply: str) -> list[str]:
    """Decode the developer-node selection: {"node_ids": [...]} or a bare list."""
    for value in _iter_json_values(reply, "{"):
        if isinstance(value, dict) and isinstance(value.get("node_ids"), list):
            return [str(x) for x in value["node_ids"]]
    for value in _iter_json_values(reply, "["):
        if isinstance(value, list) and all(isinstance(x, str) for x in value):
            return [str(x) for x in value]
    raise ReplyFormatError("no node selection in reply", reply)


def parse_patch_type_reply(reply: str) -> str:
    """Decode a patch-type prediction; a bare one-line type name is accepted."""
    for value in _iter_json_values(reply, "{"):
        if isinstance(value, dict) and isinstance(value.get("patch_type"), str):
            if value["patch_type"].strip():
                return value["patch_type"].strip()
    bare = reply.strip().strip("\"'`")
    if bare and "\n" not in bare and "{" not in bare:
        return bare
    raise ReplyFormatError("no patch type in reply", reply)


def parse_fill_mask_reply(reply: str, tokens: list[str]) -> list[str]:
    """Decode mask predictions aligned with ``tokens``."""
    for value in _iter_json_values(reply, "{"):
        if isinstance(value, dict):
            preds = []
            for tok in tokens:
                key = tok if tok in value else tok.strip("[]")
                if key not in value:
                    break
                preds.append(str(value[key]))
            else:
                return preds
    for value in _iter_json_values(reply, "["):
        if isinstance(value, list) and len(value) == len(tokens):
            return [str(x) for x in value]
    raise ReplyFormatError("no mask predictions in reply", reply)


# --------------------------------------------------------------------------
# Prompt store (templates persisted per optimizer epoch)
# --------------------------------------------------------------------------


def save_template(t: PromptTemplate, store_dir: str | Path, epoch: int | None = None) -> Path:
    """Write a template under the store; also refreshes its current.json."""
    d = Path(store_dir) / t.template_id
    d.mkdir(parents=True, exist_ok=True)
    payload = json.dumps(t.to_dict(), sort_keys=True, indent=2) + "\n"
    if epoch is not None:
        (d / f"epoch_{epoch:03d}.json").write_text(payload, encoding="utf-8")
    current = d / "current.json"
    current.write_text(payload, encoding="utf-8")
    return current


def load_templates(
    store_dir: str | Path | None, error_types: list[str]
) -> dict[str, PromptTemplate]:
    """Load current templates from a store, defaulting any missing one."""
    templates = default_templates(error_types)
    if store_dir is None:
        return templates
    for tid in TEMPLATE_IDS:
        current = Path(store_dir) / tid / "current.json"
        if current.exists():
            templates[tid] = PromptTemplate.from_dict(
                json.loads(current.read_text(encoding="utf-8"))
            )
    return templates
