"""Benchmark pipelines: ZSL, ICL, KGA and cross-attention answering, triple
ranking strategies, recall curves and cost accounting."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .accounting import AttentionCounter, kv_bytes_formula
from .cache import TripleCache
from .fusion import (ContractError, FusionConfig, TripleEncoding, cross_attention_generate,
                     fusion_context, kga_generate, rank, score_candidates)
from .kg import KnowledgeGraph
from .model import External, Model, forward, greedy_decode
from .recall import random_recall_expectation, recall_at_alpha
from .synth import QAInstance, icl_prompt, question_prompt
from .tensor import SeededRng
from .trace import TraceRecord, records_from_scores
from .vocab import Vocab, tokenize

MODES = ("zsl", "icl", "kga", "cross")
STRATEGIES = ("inward", "module-disabled", "random")
DEFAULT_ALPHAS = (1, 2, 3, 4, 5)
ICL_CAP = 100


@dataclass
class Runtime:
    """A trained model with its vocabulary, graph and triple-encoding cache."""

    model: Model
    vocab: Vocab
    kg: KnowledgeGraph
    cache: TripleCache = None

    def __post_init__(self):
        if self.cache is None:
            self.cache = TripleCache(self.model)

    def encodings(self, ids: Sequence[int]) -> list[TripleEncoding]:
        out = []
        for i in ids:
            try:
                text = self.kg.text(i)
            except KeyError:
                raise ContractError(f"candidate triple {i} not in graph") from None
            out.append(self.cache.get(text, tokenize(text, self.vocab), i))
        return out

    def prompt(self, question: str) -> list[int]:
        return question_prompt(self.vocab, question)


@dataclass
class BenchReport:
    mode: str
    seed: int
    n_instances: int = 0
    correct: int = 0
    flops: dict = field(default_factory=dict)
    peak_kv_bytes: int = 0
    seconds_per_instance: float = 0.0
    alphas: tuple = DEFAULT_ALPHAS
    recall: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.n_instances if self.n_instances else 0.0

    def rows(self) -> list[tuple[str, str]]:
        rows = [("mode", self.mode), ("seed", str(self.seed)),
                ("instances", str(self.n_instances))]
        if self.mode != "recall":
            rows += [("accuracy", f"{self.accuracy:.4f}"),
                     ("peak_kv_bytes", str(self.peak_kv_bytes)),
                     ("seconds_per_instance", f"{self.seconds_per_instance:.6f}")]
        for stage in sorted(self.flops):
            rows.append((f"flops.{stage}", str(self.flops[stage])))
        for name in sorted(self.recall):
            for a, r in zip(self.alphas, self.recall[name]):
                rows.append((f"recall.{name}.alpha{a:g}", f"{r:.4f}"))
        return rows

    def to_keyvalue(self, timing: bool = True) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.rows()
                       if timing or k != "seconds_per_instance")

    def to_table(self) -> str:
        rows = self.rows()
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows) + "\n"


def answer_text(vocab: Vocab, ids: Sequence[int]) -> str:
    return " ".join(vocab.itos[i] for i in ids)


def run_pipeline(mode: str, rt: Runtime, instances: Sequence[QAInstance],
                 fusion: FusionConfig = FusionConfig(), *, icl_cap: int | None = ICL_CAP,
                 max_new: int = 4, seed: int = 0):
    """Answer every instance in ``mode``; returns ``(BenchReport, predictions)``.

    ``cross`` fuses the same top-``k`` triples that ``kga`` would select but
    attends over them only.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
    report = BenchReport(mode, seed)
    total = AttentionCounter()
    predictions = []
    elapsed = 0.0
    for inst in instances:
        counter = AttentionCounter()
        prompt = rt.prompt(inst.question)
        t0 = time.perf_counter()
        selected: list[int] = []
        if mode == "zsl":
            out = greedy_decode(rt.model, prompt, max_new, counter=counter)
        elif mode == "icl":
            cands = inst.candidates if icl_cap is None else inst.candidates[:icl_cap]
            toks, pos = icl_prompt(rt.vocab, [rt.kg.text(i) for i in cands], inst.question)
            out = greedy_decode(rt.model, toks, max_new, positions=pos, counter=counter)
        else:
            encs = rt.encodings(inst.candidates)
            if mode == "kga":
                out, selected, _ = kga_generate(rt.model, prompt, encs, fusion, max_new,
                                                counter=counter)
            else:
                chosen = encs
                if not fusion.selection_bypass:
                    counter.stage = "score"
                    _, plain = forward(rt.model, prompt, counter=counter)
                    recs = score_candidates(rt.model, plain, encs, fusion, counter)
                    selected = rank(recs)[:fusion.k]
                    chosen = [e for e in encs if e.triple_id in set(selected)]
                out = cross_attention_generate(rt.model, prompt, chosen, max_new,
                                               counter=counter)
        elapsed += time.perf_counter() - t0
        pred = answer_text(rt.vocab, out)
        ok = pred == answer_text(rt.vocab, tokenize(inst.answer, rt.vocab))
        report.n_instances += 1
        report.correct += int(ok)
        total.merge(counter)
        predictions.append(dict(id=inst.id, prediction=pred, answer=inst.answer,
                                correct=ok, selected=list(selected)))
    report.flops = dict(sorted(total.flops.items()))
    report.peak_kv_bytes = total.peak_kv_bytes
    report.seconds_per_instance = elapsed / max(len(instances), 1)
    return report, predictions


def module_disabled_scores(model: Model, prompt: Sequence[int],
                           encodings: Sequence[TripleEncoding]) -> dict[int, float]:
    """Dot product of the mean triple-token embedding with the mean input-token
    embedding; no attention is involved."""
    E = model.params["tok_emb"]
    q = E[np.asarray(prompt)].mean(axis=0)
    return {e.triple_id: float(E[e.tokens].mean(axis=0) @ q) for e in encodings}


def rank_by(scores: dict[int, float]) -> list[int]:
    return sorted(scores, key=lambda i: (-scores[i], i))


def baseline_strategies(rt: Runtime, instances: Sequence[QAInstance],
                        fusion: FusionConfig = FusionConfig(), seed: int = 0,
                        with_records: bool = False):
    """Full rankings of every candidate pool under each strategy.

    Returns ``{strategy: [ranking per instance]}``, plus the per-instance
    score records of the inward strategy when ``with_records`` is set.
    """
    out = {s: [] for s in STRATEGIES}
    records = []
    for inst in instances:
        encs = rt.encodings(inst.candidates)
        prompt = rt.prompt(inst.question)
        _, plain = forward(rt.model, prompt)
        recs = score_candidates(rt.model, plain, encs, fusion)
        records.append(recs)
        out["inward"].append(rank(recs))
        out["module-disabled"].append(rank_by(module_disabled_scores(rt.model, prompt, encs)))
        perm = SeededRng(seed).spawn(inst.id).permutation(len(inst.candidates))
        out["random"].append([inst.candidates[i] for i in perm])
    return (out, records) if with_records else out


def recall_report(rt: Runtime, instances: Sequence[QAInstance],
                  alphas: Sequence[float] = DEFAULT_ALPHAS,
                  fusion: FusionConfig = FusionConfig(), seed: int = 0) -> BenchReport:
    rankings = baseline_strategies(rt, instances, fusion, seed)
    golds = [inst.gold for inst in instances]
    report = BenchReport("recall", seed, n_instances=len(instances), alphas=tuple(alphas))
    for name in STRATEGIES:
        report.recall[name] = recall_at_alpha(rankings[name], golds, alphas)
    report.recall["random-expected"] = random_recall_expectation(
        [len(i.candidates) for i in instances], [len(i.gold) for i in instances], alphas)
    return report


def trace_records(rt: Runtime, instances: Sequence[QAInstance],
                  fusion: FusionConfig = FusionConfig()) -> list[TraceRecord]:
    """Per-layer scores of every candidate of every instance."""
    out = []
    for inst in instances:
        _, plain = forward(rt.model, rt.prompt(inst.question))
        recs = score_candidates(rt.model, plain, rt.encodings(inst.candidates), fusion)
        out.extend(records_from_scores(inst.id, recs))
    return out


@dataclass
class DecodeCost:
    prefill_flops: int
    step_flops: list[int]
    peak_kv_bytes: int
    cached_tokens: int
    kv_formula_bytes: int
    score_flops: int = 0


def decode_cost(model: Model, tokens, external: External | None = None, *, positions=None,
                steps: int = 4, filler: int = 0) -> DecodeCost:
    """Attention FLOPs of one prefill and ``steps`` single-token decode steps.

    Every step feeds ``filler`` so the cost does not depend on predictions.
    """
    cfg = model.config
    counter = AttentionCounter(stage="prefill")
    _, states = forward(model, tokens, positions=positions, external=external, counter=counter)
    prefill = counter.flops["prefill"]
    counter.stage = "decode"
    per_step = []
    for _ in range(steps):
        before = counter.flops["decode"]
        forward(model, [filler], states, external=external, counter=counter)
        per_step.append(counter.flops["decode"] - before)
    ext_len = external.length if external is not None else 0
    cached = states.length + ext_len
    return DecodeCost(prefill, per_step, counter.peak_kv_bytes, cached,
                      kv_bytes_formula(cfg.num_layers, cfg.num_heads, cfg.head_dim, cached))


def kga_decode_cost(rt: Runtime, question: str, candidate_ids: Sequence[int],
                    fusion: FusionConfig = FusionConfig(), steps: int = 4) -> DecodeCost:
    """Score ``candidate_ids``, fuse the top ``k`` and measure decode cost."""
    model = rt.model
    cfg = model.config
    prompt = rt.prompt(question)
    encs = rt.encodings(candidate_ids)
    counter = AttentionCounter(stage="score")
    _, plain = forward(model, prompt, counter=counter)
    recs = score_candidates(model, plain, encs, fusion, counter)
    chosen = set(rank(recs)[:fusion.k])
    ext = fusion_context([e for e in encs if e.triple_id in chosen], cfg.num_layers,
                         cfg.num_heads, cfg.head_dim)
    cost = decode_cost(model, prompt, ext, steps=steps)
    cost.score_flops = counter.flops["score"]
    return cost


def icl_decode_cost(rt: Runtime, question: str, candidate_ids: Sequence[int],
                    steps: int = 4) -> DecodeCost:
    toks, pos = icl_prompt(rt.vocab, [rt.kg.text(i) for i in candidate_ids], question)
    return decode_cost(rt.model, toks, positions=pos, steps=steps)


def zsl_decode_cost(rt: Runtime, question: str, steps: int = 4) -> DecodeCost:
    return decode_cost(rt.model, rt.prompt(question), steps=steps)
