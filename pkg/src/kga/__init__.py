"""Test-time knowledge-graph fusion for a small numpy transformer.

Triples are encoded once by the host model, scored against the question by
letting their tokens attend over the question, and the best ones are exposed
to every attention layer as extra keys and values.
"""

from .fusion import (FusionConfig, TripleEncoding, cross_attention_forward, encode_triple,
                     kga_forward, kga_generate, outward_attention, rank_and_select)
from .kg import KnowledgeGraph, ingest_tsv, link_entity, retrieve_candidates
from .model import Model, ModelConfig, forward, forward_lm, greedy_decode
from .recall import recall_at_alpha
from .train import train_lm
from .vocab import Vocab, tokenize

__all__ = [
    "FusionConfig", "KnowledgeGraph", "Model", "ModelConfig", "TripleEncoding", "Vocab",
    "cross_attention_forward", "encode_triple", "forward", "forward_lm", "greedy_decode",
    "ingest_tsv", "kga_forward", "kga_generate", "link_entity", "outward_attention",
    "rank_and_select", "recall_at_alpha", "retrieve_candidates", "tokenize", "train_lm",
]
__version__ = "0.1.0"
