"""Exact attention FLOP and KV-cache byte counters.

One attention kernel call with ``nq`` queries, ``nk`` keys, ``H`` heads and
head width ``dh`` is charged ``4 * H * nq * nk * dh`` FLOPs: one multiply-add
per element of the score product and one per element of the value product.
Softmax, projections and the feed-forward block are not counted.

The KV cache of a request holds float64 keys and values for every layer, so
it occupies ``2 * L * H * dh * tokens * 8`` bytes. ``tokens`` counts cached
input positions plus the tokens of every fused triple.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

FLOAT_BYTES = 8


def attention_flops(num_heads: int, n_queries: int, n_keys: int, head_dim: int) -> int:
    return 4 * num_heads * n_queries * n_keys * head_dim


def kv_bytes_formula(num_layers: int, num_heads: int, head_dim: int, tokens: int) -> int:
    return 2 * num_layers * num_heads * head_dim * tokens * FLOAT_BYTES


@dataclass
class AttentionCounter:
    flops: dict = field(default_factory=lambda: defaultdict(int))
    calls: dict = field(default_factory=lambda: defaultdict(int))
    peak_kv_bytes: int = 0
    stage: str = "prefill"

    def add(self, n_flops: int, stage: str | None = None) -> None:
        key = stage or self.stage
        self.flops[key] += int(n_flops)
        self.calls[key] += 1

    def observe_kv(self, n_bytes: int) -> None:
        if n_bytes > self.peak_kv_bytes:
            self.peak_kv_bytes = int(n_bytes)

    @property
    def total(self) -> int:
        return sum(self.flops.values())

    def merge(self, other: "AttentionCounter") -> None:
        for k, v in other.flops.items():
            self.flops[k] += v
        for k, v in other.calls.items():
            self.calls[k] += v
        self.peak_kv_bytes = max(self.peak_kv_bytes, other.peak_kv_bytes)
