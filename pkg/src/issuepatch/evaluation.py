"""Ground-truth diff parsing and evaluation metrics.

Metrics follow the line-matching family: MatchLine against the whole
ground-truth code (or the diff region), MatchTrig against removed ("-")
lines, MatchFix against added ("+") lines, plus triggering/fixing rates at
cutoff K and per-iteration-interval buckets.
"""

from __future__ import annotations

import difflib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Sequence

from .errors import IssuePatchError, UsageError

if TYPE_CHECKING:  # pragma: no cover
    from .generation import PatchPair

DEFAULT_TAU = 0.8

BUCKET_1_3 = "iter_1_3"
BUCKET_4_7 = "iter_4_7"
BUCKET_8_PLUS = "iter_8_plus"

_WS_RUN = re.compile(r"\s+")

# Metadata prefixes a unified diff may carry besides +/-/context lines.
_DIFF_META_PREFIXES = (
    "diff ",
    "index ",
    "new file mode",
    "deleted file mode",
    "old mode",
    "new mode",
    "similarity index",
    "rename ",
    "copy ",
    "Binary files",
    "\\ No newline",
)


class DiffFormatError(IssuePatchError):
    """Input is not a unified diff; ``line_no`` is 1-based."""

    def __init__(self, line_no: int, line: str):
        super().__init__(f"not unified-diff syntax at line {line_no}: {line!r}")
        self.line_no = line_no


def normalize_line(line: str) -> str:
    """Trim and collapse internal whitespace runs to one space."""
    return _WS_RUN.sub(" ", line.strip())


@dataclass
class GroundTruthDiff:
    """Normalized "-", "+" and context lines of a ground-truth commit diff."""

    minus_lines: list[str] = field(default_factory=list)
    plus_lines: list[str] = field(default_factory=list)
    context_lines: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class CandidateVerdict:
    """Externally supplied triggering/fixing judgement for one candidate pair."""

    ir_id: str
    rank: int
    triggered: bool
    fixed: bool

    def __post_init__(self) -> None:
        if self.fixed and not self.triggered:
            raise ValueError("fixed verdict requires triggered")

    def to_dict(self) -> dict:
        return {
            "ir_id": self.ir_id,
            "rank": self.rank,
            "triggered": self.triggered,
            "fixed": self.fixed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateVerdict":
        return cls(
            ir_id=str(d["ir_id"]),
            rank=int(d["rank"]),
            triggered=bool(d["triggered"]),
            fixed=bool(d["fixed"]),
        )


def parse_unified_diff(text: str) -> GroundTruthDiff:
    """Split a unified diff into normalized minus/plus/context line lists.

    Hunk headers, file headers and git metadata lines are ignored; a line
    that fits no diff category raises :class:`DiffFormatError` with its
    line number.  Lines that normalize to the empty string are dropped.
    """
    diff = GroundTruthDiff()
    for i, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        if raw.startswith("@@"):
            continue
        if raw.startswith("+++") or raw.startswith("---"):
            continue
        if any(raw.startswith(p) for p in _DIFF_META_PREFIXES):
            continue
        if raw.startswith("-"):
            bucket = diff.minus_lines
        elif raw.startswith("+"):
            bucket = diff.plus_lines
        elif raw.startswith(" "):
            bucket = diff.context_lines
        else:
            raise DiffFormatError(i, raw)
        line = normalize_line(raw[1:])
        if line:
            bucket.append(line)
    return diff


def diff_code_pair(before: str, after: str) -> str:
    """Unified-diff text between two code snippets (no file headers kept)."""
    lines = difflib.unified_diff(
        before.splitlines(), after.splitlines(), lineterm="", n=3
    )
    return "\n".join(l for l in lines if not l.startswith(("+++", "---")))


def added_lines(before: str, after: str) -> list[str]:
    """Normalized "+" lines of the ``before`` -> ``after`` unified diff."""
    return parse_unified_diff(diff_code_pair(before, after)).plus_lines


def code_lines(code: str) -> list[str]:
    """Normalized, nonempty lines of a code snippet."""
    out = []
    for raw in code.splitlines():
        line = normalize_line(raw)
        if line:
            out.append(line)
    return out


def match_rate(generated_lines: Sequence[str], target_lines: Sequence[str]) -> float:
    """Multiset line overlap: |generated ∩ target| / |target|.

    Both sides are normalized first and empty lines dropped.  An empty target
    matched by an empty generation scores 1.0; an empty target against a
    nonempty generation scores 0.0.
    """
    gen = [n for n in (normalize_line(l) for l in generated_lines) if n]
    tgt = [n for n in (normalize_line(l) for l in target_lines) if n]
    if not tgt:
        return 1.0 if not gen else 0.0
    overlap = Counter(gen) & Counter(tgt)
    return sum(overlap.values()) / len(tgt)


@dataclass
class MatchMetrics:
    match_line: float
    match_trig: float
    match_fix: float


def candidate_match_metrics(
    insecure_code: str,
    patch: str,
    gt: GroundTruthDiff,
    full_gt_code: str | None = None,
) -> MatchMetrics:
    """Line-match rates of one candidate pair against the ground truth."""
    line_target = code_lines(full_gt_code) if full_gt_code is not None else (
        gt.minus_lines + gt.context_lines
    )
    cand_lines = code_lines(insecure_code)
    return MatchMetrics(
        match_line=match_rate(cand_lines, line_target),
        match_trig=match_rate(cand_lines, gt.minus_lines),
        match_fix=match_rate(added_lines(insecure_code, patch), gt.plus_lines),
    )


def match_metrics(
    candidates: Sequence["PatchPair"],
    gt: GroundTruthDiff,
    full_gt_code: str | None = None,
) -> MatchMetrics:
    """Best-of-K line-match rates for one issue report.

    Each metric is the maximum over the candidate list; candidates are the
    report's Top-K pairs.
    """
    if not candidates:
        return MatchMetrics(0.0, 0.0, 0.0)
    per = [
        candidate_match_metrics(c.insecure_code, c.patch, gt, full_gt_code)
        for c in candidates
    ]
    return MatchMetrics(
        match_line=max(m.match_line for m in per),
        match_trig=max(m.match_trig for m in per),
        match_fix=max(m.match_fix for m in per),
    )


def trig_fix_at_k(
    verdicts: Mapping[str, Sequence[CandidateVerdict]], k: int
) -> tuple[float, float]:
    """Triggering and fixing rates at cutoff ``k``.

    An issue report counts as triggered when any of its rank <= k candidates
    triggered, and as fixed when any of them both triggered and fixed.  Rates
    are over all reports in ``verdicts``.
    """
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if not verdicts:
        return 0.0, 0.0
    trig = fix = 0
    for vs in verdicts.values():
        top = [v for v in vs if v.rank <= k]
        if any(v.triggered for v in top):
            trig += 1
        if any(v.triggered and v.fixed for v in top):
            fix += 1
    total = len(verdicts)
    return trig / total, fix / total


def acc_type(predicted: Sequence, gt: Sequence) -> float:
    """Mean of the CWE-id accuracy and the error-type accuracy.

    Inputs are aligned lists of vulnerability types; exact string match on
    each component.
    """
    if not predicted or len(predicted) != len(gt):
        raise UsageError("acc_type needs equal-length nonempty lists")
    cwe_hits = sum(1 for p, g in zip(predicted, gt) if p.cwe_id == g.cwe_id)
    err_hits = sum(1 for p, g in zip(predicted, gt) if p.error_type == g.error_type)
    n = len(predicted)
    return (cwe_hits / n + err_hits / n) / 2


def acc_patch_type(predicted: Sequence[str], gt: Sequence[str]) -> float:
    """Exact-match accuracy of predicted patch types."""
    if not predicted or len(predicted) != len(gt):
        raise UsageError("acc_patch_type needs equal-length nonempty lists")
    return sum(1 for p, g in zip(predicted, gt) if p == g) / len(predicted)


def threshold_verdicts(
    ir_id: str,
    candidates: Sequence["PatchPair"],
    gt: GroundTruthDiff,
    tau: float = DEFAULT_TAU,
) -> list[CandidateVerdict]:
    """Derive verdicts from match rates: MatchTrig >= tau triggers, MatchFix >= tau fixes.

    A candidate can only count as fixing when it also triggers, which keeps
    the fixed => triggered invariant.
    """
    if not 0 < tau <= 1:
        raise UsageError(f"tau must be in (0, 1], got {tau}")
    out = []
    for c in candidates:
        m = candidate_match_metrics(c.insecure_code, c.patch, gt)
        triggered = m.match_trig >= tau
        fixed = triggered and m.match_fix >= tau
        out.append(
            CandidateVerdict(ir_id=ir_id, rank=c.rank, triggered=triggered, fixed=fixed)
        )
    return out


#: Verdict provider registry; external security-testing tools plug in here.
VerdictProvider = Callable[..., "list[CandidateVerdict]"]


def iteration_bucket(iterations: int) -> str:
    """Interval label for an extract/complete iteration count."""
    if iterations < 1:
        raise UsageError(f"iterations must be >= 1, got {iterations}")
    if iterations < 4:
        return BUCKET_1_3
    if iterations < 8:
        return BUCKET_4_7
    return BUCKET_8_PLUS


@dataclass
class IrResult:
    """Per-issue-report inputs to the aggregate report."""

    ir_id: str
    iterations: int
    matches: MatchMetrics | None = None
    verdicts: list[CandidateVerdict] = field(default_factory=list)
    predicted_vul_type: object | None = None
    gt_vul_type: object | None = None
    predicted_patch_type: str | None = None
    gt_patch_type: str | None = None


@dataclass
class MetricBlock:
    """One aggregated metric set (whole corpus or one iteration bucket)."""

    ir_count: int = 0
    match_line: float = 0.0
    match_trig: float = 0.0
    match_fix: float = 0.0
    acc_type: float = 0.0
    acc_patch_type: float = 0.0
    trig_at: dict[int, float] = field(default_factory=dict)
    fix_at: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ir_count": self.ir_count,
            "match_line": self.match_line,
            "match_trig": self.match_trig,
            "match_fix": self.match_fix,
            "acc_type": self.acc_type,
            "acc_patch_type": self.acc_patch_type,
            "trig_at": {str(k): v for k, v in sorted(self.trig_at.items())},
            "fix_at": {str(k): v for k, v in sorted(self.fix_at.items())},
        }


@dataclass
class EvalReport:
    """Aggregated corpus metrics plus per-iteration-interval buckets."""

    overall: MetricBlock
    buckets: dict[str, MetricBlock]
    header: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "header": self.header,
            "overall": self.overall.to_dict(),
            "buckets": {k: b.to_dict() for k, b in sorted(self.buckets.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        """Aligned plain-text rendering of the report."""
        rows = [("overall", self.overall)]
        rows += [(name, blk) for name, blk in sorted(self.buckets.items())]
        ks = sorted({k for _, blk in rows for k in blk.trig_at})
        headers = (
            ["block", "irs", "MatchLine", "MatchTrig", "MatchFix", "AccType", "AccPatchType"]
            + [f"Trig@{k}" for k in ks]
            + [f"Fix@{k}" for k in ks]
        )
        body = []
        for name, blk in rows:
            body.append(
                [
                    name,
                    str(blk.ir_count),
                    f"{blk.match_line:.3f}",
                    f"{blk.match_trig:.3f}",
                    f"{blk.match_fix:.3f}",
                    f"{blk.acc_type:.3f}",
                    f"{blk.acc_patch_type:.3f}",
                ]
                + [f"{blk.trig_at.get(k, 0.0):.3f}" for k in ks]
                + [f"{blk.fix_at.get(k, 0.0):.3f}" for k in ks]
            )
        widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(headers)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
        for r in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        if self.header:
            lines.insert(0, "# " + json.dumps(self.header, sort_keys=True))
        return "\n".join(lines) + "\n"


def _mean(values: Iterable[float]) -> float:
    vals = list(values)
    return sum(vals) / len(vals) if vals else 0.0


def aggregate_block(results: Sequence[IrResult], ks: Sequence[int]) -> MetricBlock:
    """Aggregate per-report results into one metric block.

    Match* means run over reports that have match metrics (labeled ground
    truth); Trig@K/Fix@K run over reports that carry verdicts; reports with
    neither contribute only to the count.
    """
    block = MetricBlock(ir_count=len(results))
    matched = [r.matches for r in results if r.matches is not None]
    block.match_line = _mean(m.match_line for m in matched)
    block.match_trig = _mean(m.match_trig for m in matched)
    block.match_fix = _mean(m.match_fix for m in matched)

    typed = [
        (r.predicted_vul_type, r.gt_vul_type)
        for r in results
        if r.predicted_vul_type is not None and r.gt_vul_type is not None
    ]
    if typed:
        block.acc_type = acc_type([p for p, _ in typed], [g for _, g in typed])
    ptyped = [
        (r.predicted_patch_type, r.gt_patch_type)
        for r in results
        if r.predicted_patch_type is not None and r.gt_patch_type is not None
    ]
    if ptyped:
        block.acc_patch_type = acc_patch_type(
            [p for p, _ in ptyped], [g for _, g in ptyped]
        )

    verdicts = {r.ir_id: r.verdicts for r in results if r.verdicts}
    for k in ks:
        trig, fix = trig_fix_at_k(verdicts, k)
        block.trig_at[k] = trig
        block.fix_at[k] = fix
    return block


def bucket_by_iterations(
    results: Sequence[IrResult], ks: Sequence[int] = (1, 5, 10), header: dict | None = None
) -> EvalReport:
    """Build the full report: overall block plus the three iteration buckets."""
    buckets: dict[str, list[IrResult]] = {
        BUCKET_1_3: [],
        BUCKET_4_7: [],
        BUCKET_8_PLUS: [],
    }
    for r in results:
        buckets[iteration_bucket(r.iterations)].append(r)
    return EvalReport(
        overall=aggregate_block(results, ks),
        buckets={name: aggregate_block(rs, ks) for name, rs in buckets.items()},
        header=dict(header or {}),
    )
