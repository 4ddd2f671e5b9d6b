"""Corpus loading, preprocessing, denoising and splitting.

Raw issue reports arrive as XML-like markup (code in ``<code>`` tags,
screenshots as image anchors whose linked text was extracted upstream).
Preprocessing turns them into ordered, tagged segments; merging collapses
near-duplicate snippets; denoising drops reports that are not actually
vulnerabilities; splitting carves out the label-complete pool used for
prompt optimization.
"""

from __future__ import annotations

import html
import json
import logging
import math
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable

from .distance import edit_similarity
from .errors import IssuePatchError, UsageError
from .evaluation import CandidateVerdict
from .vtp import VulType

if TYPE_CHECKING:  # pragma: no cover
    from .knowledge import KnowledgeStore

logger = logging.getLogger(__name__)

KIND_TEXT = "text"
KIND_CODE = "code"
KIND_SCREENSHOT = "screenshot_text"
SEGMENT_KINDS = (KIND_TEXT, KIND_CODE, KIND_SCREENSHOT)

DEFAULT_MERGE_THRESHOLD = 0.9

#: Case-insensitive phrases that mark a report as not describing a
#: vulnerability.  Callers can pass their own list; this default is a small
#: documented approximation of manual triage.
DEFAULT_NEGATION_RULES = (
    "not a vulnerability",
    "not a security issue",
    "no vulnerability",
    "not exploitable",
    "false positive",
    "works as intended",
)

REASON_NEGATION = "negation_rule"
REASON_DEPRECATED = "deprecated_cve"

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".gif", ".bmp", ".webp")
_TAG = re.compile(r"<(/?)([a-zA-Z][a-zA-Z0-9_\-]*)((?:[^<>\"']|\"[^\"]*\"|'[^']*')*)(/?)>")
_ATTR = re.compile(r"([a-zA-Z_:][\w:.\-]*)\s*=\s*(\"[^\"]*\"|'[^']*'|[^\s\"'>]+)")
_WS = re.compile(r"\s+")


class MarkupError(IssuePatchError):
    """Malformed markup; ``offset`` is the byte offset of the problem."""

    def __init__(self, offset: int, reason: str):
        super().__init__(f"malformed markup at byte {offset}: {reason}")
        self.offset = offset


def normalize_text(text: str) -> str:
    """Default normalization hook: trim and collapse whitespace runs."""
    return _WS.sub(" ", text.strip())


@dataclass(frozen=True)
class Segment:
    """One tagged piece of an issue-report body."""

    kind: str
    content: str

    def __post_init__(self) -> None:
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"bad segment kind {self.kind!r}")
        if not self.content.strip():
            raise ValueError("segment content empty")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "content": self.content}

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        return cls(kind=str(d["kind"]), content=str(d["content"]))


@dataclass
class IssueReport:
    """A vulnerable issue report with tagged segments and optional labels."""

    id: str
    title: str
    body_segments: list[Segment] = field(default_factory=list)
    cve_id: str | None = None
    vul_type_label: VulType | None = None
    gt_insecure_code: str | None = None
    gt_patch: str | None = None
    gt_vtp_serialized: str | None = None
    verdicts: list[CandidateVerdict] | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("issue report id empty")
        if self.gt_patch and not self.gt_insecure_code:
            raise ValueError(f"{self.id}: gt_patch present without gt_insecure_code")

    @property
    def has_labels(self) -> bool:
        return bool(self.gt_insecure_code and self.gt_patch)

    def to_dict(self) -> dict:
        d: dict = {
            "id": self.id,
            "title": self.title,
            "body_segments": [s.to_dict() for s in self.body_segments],
        }
        if self.cve_id is not None:
            d["cve_id"] = self.cve_id
        if self.vul_type_label is not None:
            d["vul_type_label"] = self.vul_type_label.to_dict()
        if self.gt_insecure_code is not None:
            d["gt_insecure_code"] = self.gt_insecure_code
        if self.gt_patch is not None:
            d["gt_patch"] = self.gt_patch
        if self.gt_vtp_serialized is not None:
            d["gt_vtp_serialized"] = self.gt_vtp_serialized
        if self.verdicts is not None:
            d["verdicts"] = [v.to_dict() for v in self.verdicts]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "IssueReport":
        verdicts = d.get("verdicts")
        return cls(
            id=str(d["id"]),
            title=str(d.get("title", "")),
            body_segments=[Segment.from_dict(s) for s in d.get("body_segments", [])],
            cve_id=d.get("cve_id"),
            vul_type_label=(
                VulType.from_dict(d["vul_type_label"])
                if d.get("vul_type_label") is not None
                else None
            ),
            gt_insecure_code=d.get("gt_insecure_code"),
            gt_patch=d.get("gt_patch"),
            gt_vtp_serialized=d.get("gt_vtp_serialized"),
            verdicts=(
                [CandidateVerdict.from_dict(v) for v in verdicts]
                if verdicts is not None
                else None
            ),
        )


@dataclass
class MarkupDocument:
    """A raw, not-yet-preprocessed issue report (body is markup)."""

    id: str
    title: str
    body: str
    cve_id: str | None = None
    vul_type_label: VulType | None = None
    gt_insecure_code: str | None = None
    gt_patch: str | None = None
    gt_vtp_serialized: str | None = None
    verdicts: list[CandidateVerdict] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "MarkupDocument":
        verdicts = d.get("verdicts")
        return cls(
            id=str(d["id"]),
            title=str(d.get("title", "")),
            body=str(d.get("body", "")),
            cve_id=d.get("cve_id"),
            vul_type_label=(
                VulType.from_dict(d["vul_type_label"])
                if d.get("vul_type_label") is not None
                else None
            ),
            gt_insecure_code=d.get("gt_insecure_code"),
            gt_patch=d.get("gt_patch"),
            gt_vtp_serialized=d.get("gt_vtp_serialized"),
            verdicts=(
                [CandidateVerdict.from_dict(v) for v in verdicts]
                if verdicts is not None
                else None
            ),
        )


@dataclass
class CorpusSplit:
    """Disjoint id sets: the prompt-optimization pool and the evaluation pool."""

    prompt_set: list[str]
    eval_set: list[str]
    seed: int

    def to_dict(self) -> dict:
        return {"prompt_set": self.prompt_set, "eval_set": self.eval_set, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSplit":
        return cls(
            prompt_set=[str(i) for i in d["prompt_set"]],
            eval_set=[str(i) for i in d["eval_set"]],
            seed=int(d["seed"]),
        )


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def _attrs(attr_text: str) -> dict[str, str]:
    out = {}
    for m in _ATTR.finditer(attr_text):
        val = m.group(2)
        if val[:1] in "\"'":
            val = val[1:-1]
        out[m.group(1).lower()] = html.unescape(val)
    return out


def _strip_tags(markup: str) -> str:
    return _TAG.sub(" ", markup)


def _is_image_ref(url: str) -> bool:
    return url.lower().split("?")[0].endswith(_IMAGE_SUFFIXES)


def preprocess_ir(
    raw: MarkupDocument,
    normalize: Callable[[str], str] = normalize_text,
    warnings: list | None = None,
) -> IssueReport:
    """Turn a raw markup document into a segmented issue report.

    ``<code>`` blocks become code segments; image anchors/tags whose linked
    or alt text was pre-extracted become screenshot-text segments (images
    with no such text are dropped with a warning record); every other tag is
    stripped and the plain text kept, run through the ``normalize`` hook.
    Segments keep document order.  Malformed markup (an unterminated tag, an
    unclosed ``<code>`` or image anchor) raises :class:`MarkupError` naming
    the byte offset.
    """
    body = raw.body
    segments: list[Segment] = []
    text_parts: list[str] = []

    def flush_text() -> None:
        if not text_parts:
            return
        text = normalize(html.unescape(" ".join(text_parts)))
        text_parts.clear()
        if text:
            segments.append(Segment(KIND_TEXT, text))

    def warn(reason: str, offset: int) -> None:
        record = {"ir_id": raw.id, "reason": reason, "byte_offset": offset}
        logger.warning("%s: %s at byte %d", raw.id, reason, offset)
        if warnings is not None:
            warnings.append(record)

    pos = 0
    n = len(body)
    while pos < n:
        lt = body.find("<", pos)
        if lt == -1:
            text_parts.append(body[pos:])
            break
        if lt > pos:
            text_parts.append(body[pos:lt])
        nxt = body[lt + 1 : lt + 2]
        if not (nxt.isalpha() or nxt == "/"):
            # bare "<" in prose; keep it literal
            text_parts.append("<")
            pos = lt + 1
            continue
        m = _TAG.match(body, lt)
        if not m:
            raise MarkupError(_byte_offset(body, lt), "unterminated tag")
        closing, name, attr_text, _self = m.group(1), m.group(2).lower(), m.group(3), m.group(4)
        pos = m.end()
        if closing:
            continue  # stray close tag of a stripped element
        if name == "code":
            end = body.find("</code>", pos)
            if end == -1:
                raise MarkupError(_byte_offset(body, lt), "unclosed <code>")
            flush_text()
            content = html.unescape(body[pos:end])
            if content.strip():
                segments.append(Segment(KIND_CODE, content))
            pos = end + len("</code>")
        elif name == "a" and _is_image_ref(_attrs(attr_text).get("href", "")):
            end = body.find("</a>", pos)
            if end == -1:
                raise MarkupError(_byte_offset(body, lt), "unclosed image anchor")
            flush_text()
            inner = normalize(html.unescape(_strip_tags(body[pos:end])))
            if inner:
                segments.append(Segment(KIND_SCREENSHOT, inner))
            else:
                warn("screenshot_without_text", _byte_offset(body, lt))
            pos = end + len("</a>")
        elif name == "img":
            flush_text()
            alt = normalize(_attrs(attr_text).get("alt", ""))
            if alt:
                segments.append(Segment(KIND_SCREENSHOT, alt))
            else:
                warn("screenshot_without_text", _byte_offset(body, lt))
        # any other tag is stripped; its inner text keeps accumulating
    flush_text()

    return IssueReport(
        id=raw.id,
        title=raw.title,
        body_segments=segments,
        cve_id=raw.cve_id,
        vul_type_label=raw.vul_type_label,
        gt_insecure_code=raw.gt_insecure_code,
        gt_patch=raw.gt_patch,
        gt_vtp_serialized=raw.gt_vtp_serialized,
        verdicts=raw.verdicts,
    )


def to_markup(ir: IssueReport) -> MarkupDocument:
    """Render a preprocessed report back to markup (inverse of preprocess)."""
    parts = []
    for seg in ir.body_segments:
        if seg.kind == KIND_CODE:
            parts.append(f"<code>{html.escape(seg.content)}</code>")
        elif seg.kind == KIND_SCREENSHOT:
            parts.append(f'<a href="shot.png">{html.escape(seg.content)}</a>')
        else:
            parts.append(f"<p>{html.escape(seg.content)}</p>")
    return MarkupDocument(
        id=ir.id,
        title=ir.title,
        body="\n".join(parts),
        cve_id=ir.cve_id,
        vul_type_label=ir.vul_type_label,
        gt_insecure_code=ir.gt_insecure_code,
        gt_patch=ir.gt_patch,
        gt_vtp_serialized=ir.gt_vtp_serialized,
        verdicts=ir.verdicts,
    )


def issue_text(ir: IssueReport) -> str:
    """Plain rendering used in prompts and masking: tagged segments under the title."""
    lines = [f"Title: {ir.title}"] if ir.title else []
    for seg in ir.body_segments:
        if seg.kind == KIND_CODE:
            lines.append(f"[CODE] {seg.content}")
        elif seg.kind == KIND_SCREENSHOT:
            lines.append(f"[SCR] {seg.content}")
        else:
            lines.append(seg.content)
    return "\n".join(lines)


def merge_similar_segments(
    segments: Iterable[Segment], threshold: float = DEFAULT_MERGE_THRESHOLD
) -> list[Segment]:
    """Collapse same-kind segments whose edit similarity reaches ``threshold``.

    Similarity is ``1 - levenshtein/max(len)``.  A merged pair keeps the
    earlier position and the longer content; passes repeat until no pair in
    the output is similar enough to merge, so the result is a fixpoint.
    """
    if not 0 <= threshold <= 1:
        raise UsageError(f"threshold must be in [0, 1], got {threshold}")
    current = list(segments)
    while True:
        kept: list[Segment] = []
        merged = False
        for seg in current:
            for i, rep in enumerate(kept):
                if rep.kind != seg.kind:
                    continue
                if edit_similarity(rep.content, seg.content) >= threshold:
                    if len(seg.content) > len(rep.content):
                        kept[i] = Segment(rep.kind, seg.content)
                    merged = True
                    break
            else:
                kept.append(seg)
        current = kept
        if not merged:
            return current


def denoise_corpus(
    corpus: list[IssueReport],
    kb: "KnowledgeStore | None" = None,
    negation_rules: Iterable[str] = DEFAULT_NEGATION_RULES,
) -> tuple[list[IssueReport], list[tuple[str, str]]]:
    """Drop reports that explicitly deny a vulnerability or cite a deprecated CVE.

    Every removal carries a machine-readable reason; an empty rule set and an
    empty knowledge base make this the identity.
    """
    rules = [r.lower() for r in negation_rules]
    deprecated = kb.deprecated_ids() if kb is not None else set()
    kept: list[IssueReport] = []
    removed: list[tuple[str, str]] = []
    for ir in corpus:
        text = " ".join([ir.title] + [s.content for s in ir.body_segments]).lower()
        if any(rule in text for rule in rules):
            removed.append((ir.id, REASON_NEGATION))
        elif ir.cve_id and ir.cve_id in deprecated:
            removed.append((ir.id, REASON_DEPRECATED))
        else:
            kept.append(ir)
    return kept, removed


def split_dataset(corpus: list[IssueReport], ratio: float, seed: int) -> CorpusSplit:
    """Deterministic split into a prompt pool and an evaluation pool.

    Only label-complete reports (both insecure code and patch) are eligible
    for the prompt pool, which gets ``floor(ratio * |eligible|)`` of them;
    everything else, including all label-free reports, evaluates.  The result
    is a pure function of the corpus ids, the ratio and the seed.
    """
    if not 0 < ratio < 1:
        raise UsageError(f"ratio must be in (0, 1), got {ratio}")
    eligible = sorted(ir.id for ir in corpus if ir.has_labels)
    if not eligible:
        logger.warning("no label-complete reports: prompt pool is empty")
    rng = random.Random(seed)
    shuffled = list(eligible)
    rng.shuffle(shuffled)
    take = math.floor(ratio * len(eligible))
    prompt = set(shuffled[:take])
    all_ids = [ir.id for ir in corpus]
    return CorpusSplit(
        prompt_set=sorted(prompt),
        eval_set=sorted(set(all_ids) - prompt),
        seed=seed,
    )


# --------------------------------------------------------------------------
# Corpus file I/O (JSON Lines, one report per line, UTF-8)
# --------------------------------------------------------------------------


def load_raw_documents(path: str | Path) -> list[MarkupDocument]:
    docs = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                docs.append(MarkupDocument.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise IssuePatchError(f"{path}:{line_no}: bad raw document: {e}") from e
    return docs


def load_corpus(path: str | Path) -> list[IssueReport]:
    corpus = []
    seen = set()
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ir = IssueReport.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise IssuePatchError(f"{path}:{line_no}: bad issue report: {e}") from e
            if ir.id in seen:
                raise IssuePatchError(f"{path}:{line_no}: duplicate id {ir.id!r}")
            seen.add(ir.id)
            corpus.append(ir)
    return corpus


def dump_corpus(corpus: Iterable[IssueReport], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ir in corpus:
            fh.write(json.dumps(ir.to_dict(), sort_keys=True) + "\n")


def save_split(split: CorpusSplit, path: str | Path) -> None:
    Path(path).write_text(json.dumps(split.to_dict(), sort_keys=True, indent=2) + "\n")


def load_split(path: str | Path) -> CorpusSplit:
    return CorpusSplit.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
