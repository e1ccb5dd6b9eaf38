"""Synthetic single- and two-hop KGQA data.

Facts are random ``(head, relation, tail)`` triples with unique
``(head, relation)`` pairs, so every question has one answer. Training
sequences put one or more fact texts in a context segment, followed by a
question segment that restarts at position 0::

    (e3, r1, e7) (e3, r4, e2) <sep> what is the r1 of e3 ? <ans> e7 <sep>

Training facts are sampled afresh for every sequence, independently of the
graph, so an answer can only be read from the context and never memorized.
The graph's facts never appear in the training corpus.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kg import KnowledgeGraph, link_entity, retrieve_candidates, triple_to_text
from .tensor import SeededRng
from .train import TrainingSequence
from .vocab import Vocab, tokenize

TEMPLATE_WORDS = ("what", "is", "the", "of", "?", "(", ",", ")", "yes", "no")


class GenerationError(ValueError):
    pass


@dataclass
class QAInstance:
    id: int
    question: str
    answer: str
    gold: list[int]
    candidates: list[int]
    anchor: str = ""
    hop: int = 1

    def __post_init__(self):
        if not set(self.gold) <= set(self.candidates):
            raise ValueError(f"instance {self.id}: gold triples missing from candidates")

    def to_dict(self) -> dict:
        return dict(id=self.id, question=self.question, answer=self.answer, gold=self.gold,
                    candidates=self.candidates, anchor=self.anchor, hop=self.hop)


@dataclass
class CorpusItem:
    """A training example.

    Answer items put ``context`` before the question and supervise
    ``answer``. Judgment items (``labels`` set) put the question first and
    follow every fact with ``yes`` or ``no`` depending on whether it is
    needed to answer.
    """

    context: list[str]
    question: str
    answer: str
    labels: list[bool] | None = None


@dataclass
class SyntheticKGQA:
    kg: KnowledgeGraph
    corpus: list[CorpusItem]
    instances: list[QAInstance]
    vocab: Vocab = field(default=None)

    def __post_init__(self):
        if self.vocab is None:
            self.vocab = build_vocab(self.kg)


def build_vocab(kg: KnowledgeGraph) -> Vocab:
    texts = list(TEMPLATE_WORDS)
    texts += [triple_to_text(t) for t in kg.triples]
    return Vocab.from_texts(texts)


def question_text(relations: list[str], head: str) -> str:
    """``relations`` innermost first: ``[r1, r2]`` asks for r2 of (r1 of head)."""
    chain = " of the ".join(reversed(relations))
    return f"what is the {chain} of {head} ?"


def question_prompt(vocab: Vocab, question: str) -> list[int]:
    return [vocab.sep_id] + tokenize(question, vocab) + [vocab.ans_id]


def context_tokens(vocab: Vocab, texts: list[str]) -> list[int]:
    return [i for t in texts for i in tokenize(t, vocab)]


def icl_prompt(vocab: Vocab, texts: list[str], question: str):
    """Flattened triple texts then the question; returns ``(tokens, positions)``."""
    ctx = context_tokens(vocab, texts)
    q = question_prompt(vocab, question)
    return ctx + q, list(range(len(ctx))) + list(range(len(q)))


def to_training_sequence(vocab: Vocab, item: CorpusItem) -> TrainingSequence:
    if item.labels is not None:
        return _judgment_sequence(vocab, item)
    ctx = context_tokens(vocab, item.context)
    q = question_prompt(vocab, item.question)
    ans = tokenize(item.answer, vocab) + [vocab.sep_id]
    tokens = ctx + q + ans
    positions = list(range(len(ctx))) + list(range(len(q) + len(ans)))
    mask = np.zeros(len(tokens) - 1, dtype=bool)
    mask[len(ctx) + len(q) - 1:] = True  # supervise the answer and its terminator
    return TrainingSequence(np.array(tokens), np.array(positions), mask)


def _judgment_sequence(vocab: Vocab, item: CorpusItem) -> TrainingSequence:
    tokens = question_prompt(vocab, item.question)
    positions = list(range(len(tokens)))
    supervised = []
    for text, relevant in zip(item.context, item.labels):
        fact = tokenize(text, vocab)
        tokens += fact + [vocab.stoi["yes" if relevant else "no"]]
        positions += list(range(len(fact) + 1))  # each fact restarts at 0
        supervised.append(len(tokens) - 2)
    mask = np.zeros(len(tokens) - 1, dtype=bool)
    mask[supervised] = True
    return TrainingSequence(np.array(tokens), np.array(positions), mask)


def gen_synthetic_kgqa(seed: int, n_entities: int, n_relations: int, n_facts: int,
                       n_questions: int, hop: int = 1, *, n_train: int = 20000,
                       max_context: int = 8, min_pool: int = 0,
                       judge_fraction: float = 0.5) -> SyntheticKGQA:
    """Random graph, training corpus and held-out questions.

    ``min_pool`` drops test instances whose candidate pool is smaller.
    ``judge_fraction`` of the corpus are judgment items.
    """
    if not 0.0 <= judge_fraction <= 1.0:
        raise GenerationError("judge_fraction must lie in [0, 1]")
    if hop not in (1, 2):
        raise GenerationError("hop must be 1 or 2")
    if n_facts > n_entities * n_relations or n_entities < 2 or n_relations < 1:
        raise GenerationError("n_facts must not exceed n_entities * n_relations")
    rng = SeededRng(seed)
    ents = [f"e{i}" for i in range(n_entities)]
    rels = [f"r{i}" for i in range(n_relations)]
    pairs = rng.choice(n_entities * n_relations, size=n_facts, replace=False)
    rows = []
    for p in pairs:
        h, r = divmod(int(p), n_relations)
        t = int(rng.integers(0, n_entities - 1))
        t = t + 1 if t >= h else t
        rows.append((ents[h], rels[r], ents[t]))
    kg = KnowledgeGraph.from_tuples(rows)

    # test questions
    order = [int(i) for i in rng.permutation(n_facts)]
    instances: list[QAInstance] = []
    held: set[int] = set()
    for fid in order:
        if len(instances) >= n_questions:
            break
        f = kg[fid]
        if hop == 1:
            gold, rels_q, answer = [fid], [f.relation], f.tail
        else:
            nxt = kg.by_head.get(f.tail, [])
            nxt = [i for i in nxt if kg[i].tail != f.head]
            if not nxt:
                continue
            g2 = kg[nxt[int(rng.integers(0, len(nxt)))]]
            gold, rels_q, answer = [fid, g2.id], [f.relation, g2.relation], g2.tail
        if held & set(gold):
            continue
        q = question_text(rels_q, f.head)
        anchor, _ = link_entity(q, kg)
        cands = retrieve_candidates(anchor, kg, hop)
        if not set(gold) <= set(cands) or len(cands) < min_pool:
            continue
        held.update(gold)
        instances.append(QAInstance(len(instances), q, answer, gold, cands, anchor, hop))
    if len(instances) < n_questions:
        raise GenerationError(
            f"only {len(instances)} of {n_questions} questions satisfy the constraints")

    corpus = _training_corpus(rng, ents, rels, n_train, hop, max_context, judge_fraction)
    vocab = Vocab.from_texts(list(TEMPLATE_WORDS) + ents + rels)
    return SyntheticKGQA(kg, corpus, instances, vocab)


def _neighbourhood(rng: SeededRng, ents, rels, head: int, size: int, exclude_rel=()):
    """Up to ``size`` random facts incident to ``head``, with unique
    ``(head, relation)`` pairs among the outgoing ones."""
    free = [r for r in range(len(rels)) if r not in exclude_rel]
    facts = []
    for _ in range(size):
        other = int(rng.integers(0, len(ents) - 1))
        other = other + 1 if other >= head else other
        if free and rng.uniform() < 0.5:
            r = free.pop(int(rng.integers(0, len(free))))
            facts.append((ents[head], rels[r], ents[other]))
        else:
            r = int(rng.integers(0, len(rels)))
            facts.append((ents[other], rels[r], ents[head]))
    return facts


def _training_corpus(rng: SeededRng, ents, rels, n_train: int, hop: int,
                     max_context: int, judge_fraction: float = 0.0) -> list[CorpusItem]:
    corpus = []
    n_e, n_r = len(ents), len(rels)
    for i in range(n_train):
        h = int(rng.integers(0, n_e))
        two = hop == 2 and i % 2 == 1
        r1 = int(rng.integers(0, n_r))
        b = int(rng.integers(0, n_e - 1))
        b = b + 1 if b >= h else b
        facts = [(ents[h], rels[r1], ents[b])]
        if two:
            r2 = int(rng.integers(0, n_r))
            t = int(rng.integers(0, n_e - 1))
            t = t + 1 if t >= b else t
            facts.append((ents[b], rels[r2], ents[t]))
            question, answer = question_text([rels[r1], rels[r2]], ents[h]), ents[t]
        else:
            question, answer = question_text([rels[r1]], ents[h]), ents[b]
        extra = int(rng.integers(0, max_context - len(facts) + 1))
        n_h = extra if not two else int(rng.integers(0, extra + 1))
        facts += _neighbourhood(rng, ents, rels, h, n_h, exclude_rel={r1})
        if two:
            facts += _neighbourhood(rng, ents, rels, b, extra - n_h, exclude_rel={r2})
        n_gold = 2 if two else 1
        order = rng.permutation(len(facts))
        texts = [f"({facts[j][0]}, {facts[j][1]}, {facts[j][2]})" for j in order]
        labels = None
        if rng.uniform() < judge_fraction:
            labels = [int(j) < n_gold for j in order]
        corpus.append(CorpusItem(texts, question, answer, labels))
    return corpus
