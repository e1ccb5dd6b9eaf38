"""Knowledge-graph-guided attention on top of :mod:`kga.model`.

A request runs in two passes over the host model, whose weights are never
modified:

1. Scoring pass. Plain causal forward over the input. For every candidate
   triple and every layer, the triple's own queries attend (non-causally)
   over all input keys/values (inward flow). The resulting rows are collapsed
   with the triple's last-token self-attention weights, and the collapsed
   vector is dotted with the last input position's attention output.
2. Fusion pass. Forward over the input where, at every layer, each input
   query attends jointly over its causal input prefix and over the tokens
   of the selected triples (outward flow).

Triples are encoded alone with positions starting at 0, so an encoding
depends only on the triple text and the model and can be cached.

Multi-head: every formula is applied per head on ``head_dim`` slices. The
score of a layer is the dot product of the concatenated head vectors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .accounting import AttentionCounter, attention_flops
from .model import External, LayerStates, Model, attend, forward, greedy_decode, merge_heads
from .tensor import DomainError, softmax_rows


class ContractError(ValueError):
    """Inputs violate a cross-argument contract (layers, lengths, dims)."""


class TripleLayer(NamedTuple):
    layer: int
    queries: np.ndarray  # [H, M, dh]
    keys: np.ndarray
    values: np.ndarray
    last_weights: np.ndarray  # [H, M]


@dataclass(frozen=True, eq=False)
class TripleEncoding:
    triple_id: int
    tokens: np.ndarray
    hidden: list  # per layer [M, D]
    queries: list  # per layer [H, M, dh]
    keys: list
    values: list
    last_weights: list  # per layer [H, M]

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def num_layers(self) -> int:
        return len(self.keys)

    def at(self, layer: int) -> TripleLayer:
        return TripleLayer(layer, self.queries[layer], self.keys[layer],
                           self.values[layer], self.last_weights[layer])

    def with_id(self, triple_id: int) -> "TripleEncoding":
        return dataclasses.replace(self, triple_id=triple_id)


@dataclass(frozen=True)
class FusionConfig:
    k: int = 3
    score_aggregation: str = "mean"  # "mean" | "last" | "layer"
    layer: int | None = None  # 1-based, for score_aggregation="layer"
    selection_bypass: bool = False

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.score_aggregation not in ("mean", "last", "layer"):
            raise ValueError(f"unknown score aggregation {self.score_aggregation!r}")
        if self.score_aggregation == "layer" and (self.layer is None or self.layer < 1):
            raise ValueError("named-layer aggregation needs a 1-based layer")


@dataclass
class TripleScoreRecord:
    triple_id: int
    layer_scores: np.ndarray
    score: float
    consolidated: list = field(default_factory=list, repr=False)


def encode_triple(model: Model, tokens, triple_id: int = -1,
                  counter: AttentionCounter | None = None) -> TripleEncoding:
    """Run the model over the triple tokens alone (positions ``0..M-1``)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise DomainError("cannot encode an empty triple")
    _, st = forward(model, tokens, positions=np.arange(len(tokens)), trace=True, counter=counter)
    last = [st.weights[l][0][:, -1, :].copy() for l in range(model.config.num_layers)]
    for arrs in (st.hidden, st.queries, st.keys, st.values, last):
        for a in arrs:
            a.setflags(write=False)
    return TripleEncoding(int(triple_id), tokens, st.hidden, st.queries, st.keys,
                          st.values, last)


def fusion_context(encodings: Sequence[TripleEncoding], num_layers: int, num_heads: int,
                   head_dim: int) -> External:
    """Per-layer concatenation of the triples' keys and values.

    Triples are concatenated in ascending id order so the result does not
    depend on the order of ``encodings``.
    """
    if not encodings:
        z = np.zeros((num_heads, 0, head_dim))
        return External([z] * num_layers, [z] * num_layers)
    encs = sorted(encodings, key=lambda e: e.triple_id)
    for e in encs:
        if e.num_layers != num_layers:
            raise ContractError("triple encoded with a different layer count")
    keys = [np.concatenate([e.keys[l] for e in encs], axis=1) for l in range(num_layers)]
    vals = [np.concatenate([e.values[l] for e in encs], axis=1) for l in range(num_layers)]
    return External(keys, vals)


def outward_attention(states: LayerStates, layer: int, n: int,
                      triples: Sequence[TripleLayer]) -> np.ndarray:
    """Fused attention output of input position ``n`` (1-based) at ``layer``.

    One softmax over the causal input logits and the logits against every
    token of every given triple. Output is the concatenated head vector
    before the output projection.
    """
    if not 1 <= n <= states.length:
        raise ContractError(f"position {n} not populated (have {states.length})")
    for t in triples:
        if t.layer != layer:
            raise ContractError(f"triple states from layer {t.layer} used at layer {layer}")
    q = states.queries[layer][:, n - 1:n]
    k = states.keys[layer][:, :n]
    v = states.values[layer][:, :n]
    ek = ev = None
    if triples:
        ek = np.concatenate([t.keys for t in triples], axis=1)
        ev = np.concatenate([t.values for t in triples], axis=1)
    out, _ = attend(q, k, v, start=n - 1, ext_k=ek, ext_v=ev)
    return merge_heads(out)[0]


def inward_attention(triple: TripleLayer, states: LayerStates, layer: int | None = None,
                     counter: AttentionCounter | None = None) -> np.ndarray:
    """Triple queries attend over all input positions without a causal mask.

    Returns ``R`` with shape ``[H, M, dh]``.
    """
    layer = triple.layer if layer is None else layer
    if triple.layer != layer:
        raise ContractError(f"triple states from layer {triple.layer} used at layer {layer}")
    if states.length == 0:
        raise DomainError("inward attention needs at least one input position")
    kx, vx = states.keys[layer], states.values[layer]
    H, M, dh = triple.queries.shape
    logits = (triple.queries @ kx.transpose(0, 2, 1)) / np.sqrt(dh)
    if counter is not None:
        counter.add(attention_flops(H, M, kx.shape[1], dh), stage="score")
    return softmax_rows(logits) @ vx


def consolidate(R: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of the rows of ``R``.

    Accepts ``R [M, D]`` with ``weights [M]``, or per-head ``R [H, M, dh]``
    with ``weights [H, M]``; the per-head result is flattened to ``[H * dh]``.
    """
    R = np.asarray(R, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if R.ndim == 2:
        R, w = R[None], w[None]
    if w.shape != R.shape[:2]:
        raise ContractError(f"weights {w.shape} do not match rows {R.shape[:2]}")
    if np.any(w < 0) or np.any(np.abs(w.sum(-1) - 1.0) > 1e-9):
        raise ContractError("consolidation weights must be a probability vector")
    return np.einsum("hm,hmd->hd", w, R).reshape(-1)


def score_triple(consolidated: Sequence[np.ndarray], last_input: Sequence[np.ndarray],
                 config: FusionConfig = FusionConfig(), triple_id: int = -1) -> TripleScoreRecord:
    """Per-layer dot products and their aggregate under ``config``."""
    if len(consolidated) != len(last_input) or not consolidated:
        raise ContractError("need one consolidated and one input vector per layer")
    scores = []
    for r, x in zip(consolidated, last_input):
        r, x = np.ravel(r), np.ravel(x)
        if r.shape != x.shape:
            raise ContractError(f"vector sizes differ: {r.shape} vs {x.shape}")
        scores.append(float(r @ x))
    scores = np.array(scores)
    if config.score_aggregation == "mean":
        agg = float(scores.mean())
    elif config.score_aggregation == "last":
        agg = float(scores[-1])
    else:
        if config.layer > len(scores):
            raise ContractError(f"layer {config.layer} out of range 1..{len(scores)}")
        agg = float(scores[config.layer - 1])
    return TripleScoreRecord(int(triple_id), scores, agg, list(consolidated))


def rank(records: Sequence[TripleScoreRecord]) -> list[int]:
    """All ids, by descending score then ascending id."""
    return [r.triple_id for r in sorted(records, key=lambda r: (-r.score, r.triple_id))]


def rank_and_select(records: Sequence[TripleScoreRecord], k: int) -> list[int]:
    return rank(records)[:max(k, 0)]


def score_candidates(model: Model, states: LayerStates,
                     candidates: Sequence[TripleEncoding],
                     config: FusionConfig = FusionConfig(),
                     counter: AttentionCounter | None = None) -> list[TripleScoreRecord]:
    """Inward attention, consolidation and scoring for every candidate."""
    L = model.config.num_layers
    last_input = [states.attn_out[l][-1] for l in range(L)]
    records = []
    for enc in candidates:
        if enc.num_layers != L:
            raise ContractError("triple encoded with a different layer count")
        rhat = [consolidate(inward_attention(enc.at(l), states, l, counter=counter),
                            enc.last_weights[l]) for l in range(L)]
        records.append(score_triple(rhat, last_input, config, enc.triple_id))
    return records


@dataclass
class KGAResult:
    logits: np.ndarray
    selected: list[int]
    records: list[TripleScoreRecord]
    states: LayerStates
    external: External


def _select(model, tokens, positions, candidates, config, counter):
    candidates = list(candidates)
    if config.selection_bypass:
        return candidates, []
    if counter is not None:
        counter.stage = "score"
    _, plain = forward(model, tokens, positions=positions, counter=counter)
    records = score_candidates(model, plain, candidates, config, counter)
    chosen = set(rank_and_select(records, config.k))
    return [c for c in candidates if c.triple_id in chosen], records


def kga_forward(model: Model, tokens, candidates: Sequence[TripleEncoding],
                config: FusionConfig = FusionConfig(), *, positions=None,
                counter: AttentionCounter | None = None) -> KGAResult:
    """Score candidates, keep the top ``k``, then run the fused forward."""
    cfg = model.config
    selected, records = _select(model, tokens, positions, candidates, config, counter)
    ext = fusion_context(selected, cfg.num_layers, cfg.num_heads, cfg.head_dim)
    if counter is not None:
        counter.stage = "prefill"
    logits, states = forward(model, tokens, positions=positions, external=ext, counter=counter)
    ids = rank_and_select(records, config.k) if records else sorted(e.triple_id for e in selected)
    return KGAResult(logits, ids, records, states, ext)


def kga_generate(model: Model, prompt, candidates: Sequence[TripleEncoding],
                 config: FusionConfig = FusionConfig(), max_new: int = 4, *,
                 stop_ids=(3, 4), counter: AttentionCounter | None = None):
    """Greedy answer with fused triples. Scores once, before generation.

    Returns ``(token ids, selected ids, score records)``.
    """
    cfg = model.config
    selected, records = _select(model, prompt, None, candidates, config, counter)
    ext = fusion_context(selected, cfg.num_layers, cfg.num_heads, cfg.head_dim)
    out = greedy_decode(model, prompt, max_new, external=ext, stop_ids=stop_ids, counter=counter)
    ids = rank_and_select(records, config.k) if records else sorted(e.triple_id for e in selected)
    return out, ids, records


def cross_attention_forward(model: Model, tokens, candidates: Sequence[TripleEncoding], *,
                            positions=None, counter: AttentionCounter | None = None):
    """Ablation: input queries attend over triple keys/values only."""
    if not candidates:
        raise DomainError("cross attention needs at least one triple")
    cfg = model.config
    ext = fusion_context(candidates, cfg.num_layers, cfg.num_heads, cfg.head_dim)
    logits, _ = forward(model, tokens, positions=positions, external=ext, cross=True,
                        counter=counter)
    return logits


def cross_attention_generate(model: Model, prompt, candidates: Sequence[TripleEncoding],
                             max_new: int = 4, *, stop_ids=(3, 4),
                             counter: AttentionCounter | None = None) -> list[int]:
    if not candidates:
        raise DomainError("cross attention needs at least one triple")
    cfg = model.config
    ext = fusion_context(candidates, cfg.num_layers, cfg.num_heads, cfg.head_dim)
    return greedy_decode(model, prompt, max_new, external=ext, cross=True,
                         stop_ids=stop_ids, counter=counter)
