"""Triple store, trigram entity linking and hop-bounded candidate retrieval."""

from __future__ import annotations

import json
import logging
import string
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)


class EmptyGraphError(ValueError):
    pass


class UnknownEntityError(KeyError):
    pass


@dataclass(frozen=True)
class Triple:
    id: int
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if not all(s.strip() for s in (self.head, self.relation, self.tail)):
            raise ValueError(f"triple {self.id} has an empty field")


def triple_to_text(t: Triple) -> str:
    return f"({t.head}, {t.relation}, {t.tail})"


def normalize(text: str) -> str:
    """Lowercase, collapse whitespace, strip surrounding punctuation."""
    text = " ".join(text.lower().split())
    return text.strip(string.punctuation + " ")


def trigrams(text: str) -> set[str]:
    # One space of padding on each side so names shorter than three
    # characters still yield trigrams and word boundaries count.
    s = f" {normalize(text)} "
    return {s[i:i + 3] for i in range(len(s) - 2)}


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


@dataclass
class KnowledgeGraph:
    triples: list[Triple] = field(default_factory=list)
    malformed: int = 0

    def __post_init__(self):
        self.by_head: dict[str, list[int]] = defaultdict(list)
        self.by_tail: dict[str, list[int]] = defaultdict(list)
        self.entities: dict[str, str] = {}
        self._by_id: dict[int, Triple] = {}
        for t in self.triples:
            if t.id in self._by_id:
                raise ValueError(f"duplicate triple id {t.id}")
            self._by_id[t.id] = t
            self.by_head[t.head].append(t.id)
            self.by_tail[t.tail].append(t.id)
            self.entities.setdefault(t.head, normalize(t.head))
            self.entities.setdefault(t.tail, normalize(t.tail))
        self._entity_grams = {e: trigrams(n) for e, n in self.entities.items()}

    @classmethod
    def from_tuples(cls, rows) -> "KnowledgeGraph":
        return cls([Triple(i, h, r, t) for i, (h, r, t) in enumerate(rows)])

    def __len__(self) -> int:
        return len(self.triples)

    def __getitem__(self, triple_id: int) -> Triple:
        return self._by_id[triple_id]

    def text(self, triple_id: int) -> str:
        return triple_to_text(self._by_id[triple_id])

    def incident(self, entity: str) -> list[int]:
        return self.by_head.get(entity, []) + self.by_tail.get(entity, [])

    def to_json(self) -> str:
        return json.dumps(
            [{"id": t.id, "head": t.head, "relation": t.relation, "tail": t.tail}
             for t in self.triples],
            indent=1,
        )

    def to_tsv(self, path) -> None:
        lines = [f"{t.head}\t{t.relation}\t{t.tail}\n" for t in self.triples]
        Path(path).write_text("".join(lines), encoding="utf-8")


def ingest_tsv(path) -> KnowledgeGraph:
    """Read ``head<TAB>relation<TAB>tail`` lines; ids follow line order.

    Lines without exactly three non-empty fields are skipped and counted in
    ``KnowledgeGraph.malformed``. Duplicate lines are kept.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    triples, bad = [], 0
    for line in raw.splitlines():
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != 3 or not all(parts):
            bad += 1
            continue
        triples.append(Triple(len(triples), *parts))
    if bad:
        log.warning("%s: skipped %d malformed line(s)", path, bad)
    if not triples:
        raise EmptyGraphError(f"{path}: no valid triples")
    kg = KnowledgeGraph(triples)
    kg.malformed = bad
    return kg


def link_entity(question: str, kg: KnowledgeGraph) -> tuple[str, float]:
    """Entity whose trigram set has the highest Jaccard overlap with the question.

    Ties go to the lexicographically smallest entity name.
    """
    if not question.strip():
        raise ValueError("empty question")
    if not kg.entities:
        raise EmptyGraphError("graph has no entities")
    q = trigrams(question)
    best, best_score = None, -1.0
    for entity in sorted(kg.entities):
        s = jaccard(kg._entity_grams[entity], q)
        if s > best_score:
            best, best_score = entity, s
    return best, best_score


def retrieve_candidates(anchor: str, kg: KnowledgeGraph, hops: int = 1) -> list[int]:
    """Ids of triples incident to entities within ``hops - 1`` steps of ``anchor``.

    Both head and tail incidence count. Result is sorted ascending.
    """
    if hops not in (1, 2):
        raise ValueError("hops must be 1 or 2")
    if anchor not in kg.entities:
        raise UnknownEntityError(anchor)
    first = set(kg.incident(anchor))
    if hops == 1:
        return sorted(first)
    frontier = {kg[i].head for i in first} | {kg[i].tail for i in first}
    found = set(first)
    for e in frontier:
        found.update(kg.incident(e))
    return sorted(found)
