"""Golden vulnerability knowledge: storage, indexing and retrieval.

The store holds curated entries (description plus an insecure-code exemplar)
keyed by CWE id and by keyword tokens.  Retrieval is exact CWE match union
keyword-token overlap; there is deliberately no embedding search here.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IssuePatchError

logger = logging.getLogger(__name__)

DEFAULT_TOP_R = 3

_TOKEN = re.compile(r"[A-Za-z0-9_\-]+")

# Words too common in vulnerability prose to carry retrieval signal.
STOPWORDS = frozenset(
    """a an and are as at be by for from has have in into is it its of on or
    that the then this to via was when which will with executes execute the
    program code function may can""".split()
)


class KnowledgeFormatError(IssuePatchError):
    """A knowledge-base line failed to parse; ``line_no`` is 1-based."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"bad knowledge item at line {line_no}: {reason}")
        self.line_no = line_no


@dataclass(frozen=True)
class GoldenKnowledgeItem:
    """One curated vulnerability entry with its insecure-code exemplar."""

    kb_id: str
    source_db: str
    cwe_id: str
    title: str
    description: str
    insecure_code: str
    deprecated: bool = False

    def to_dict(self) -> dict:
        return {
            "kb_id": self.kb_id,
            "source_db": self.source_db,
            "cwe_id": self.cwe_id,
            "title": self.title,
            "description": self.description,
            "insecure_code": self.insecure_code,
            "deprecated": self.deprecated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GoldenKnowledgeItem":
        return cls(
            kb_id=str(d["kb_id"]),
            source_db=str(d.get("source_db", "")),
            cwe_id=str(d.get("cwe_id", "CWE-UNKNOWN")),
            title=str(d.get("title", "")),
            description=str(d.get("description", "")),
            insecure_code=str(d.get("insecure_code", "")),
            deprecated=bool(d.get("deprecated", False)),
        )


def tokenize(text: str) -> list[str]:
    """Lowercased keyword tokens with stopwords removed."""
    return [t.lower() for t in _TOKEN.findall(text) if t.lower() not in STOPWORDS]


@dataclass
class KnowledgeStore:
    """In-memory store with CWE and keyword-token indexes."""

    items: dict[str, GoldenKnowledgeItem] = field(default_factory=dict)
    by_cwe: dict[str, list[str]] = field(default_factory=dict)
    by_token: dict[str, set[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.items)

    def add(self, item: GoldenKnowledgeItem) -> None:
        if item.kb_id in self.items:
            logger.warning("duplicate kb_id %s: last item wins", item.kb_id)
            self._unindex(self.items[item.kb_id])
        self.items[item.kb_id] = item
        self.by_cwe.setdefault(item.cwe_id, []).append(item.kb_id)
        for tok in set(tokenize(f"{item.title} {item.description}")):
            self.by_token.setdefault(tok, set()).add(item.kb_id)

    def _unindex(self, item: GoldenKnowledgeItem) -> None:
        ids = self.by_cwe.get(item.cwe_id, [])
        if item.kb_id in ids:
            ids.remove(item.kb_id)
        for tok in set(tokenize(f"{item.title} {item.description}")):
            self.by_token.get(tok, set()).discard(item.kb_id)

    def deprecated_ids(self) -> set[str]:
        """kb_ids flagged deprecated; used to drop reports citing dead CVEs."""
        return {i.kb_id for i in self.items.values() if i.deprecated}

    def search(self, queries: list[str], top_r: int = DEFAULT_TOP_R) -> list[GoldenKnowledgeItem]:
        """Rank items by exact-CWE hits plus keyword-token overlap.

        A query equal to an indexed CWE id weighs heavier than token overlap;
        ties break on kb_id so results are deterministic.
        """
        scores: dict[str, float] = {}
        for q in queries:
            if q in self.by_cwe:
                for kb_id in self.by_cwe[q]:
                    scores[kb_id] = scores.get(kb_id, 0.0) + 10.0
            for tok in tokenize(q):
                for kb_id in self.by_token.get(tok, ()):
                    scores[kb_id] = scores.get(kb_id, 0.0) + 1.0
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        return [self.items[kb_id] for kb_id, _ in ranked[:top_r]]

    def dump(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for kb_id in sorted(self.items):
                fh.write(json.dumps(self.items[kb_id].to_dict(), sort_keys=True) + "\n")


def ingest_kb(path: str | Path) -> KnowledgeStore:
    """Load a JSONL knowledge base and build both indexes.

    Duplicate kb_ids keep the last item (with a warning); a malformed line
    raises :class:`KnowledgeFormatError` naming the line number.
    """
    store = KnowledgeStore()
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                item = GoldenKnowledgeItem.from_dict(d)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise KnowledgeFormatError(line_no, str(e)) from e
            store.add(item)
    return store


def load_store(path: str | Path) -> KnowledgeStore:
    """Load a store from a JSONL file or from a directory holding items.jsonl."""
    p = Path(path)
    if p.is_dir():
        p = p / "items.jsonl"
    return ingest_kb(p)
