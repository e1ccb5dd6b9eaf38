"""
Fusing graph triples into attention
===================================

A walk through the three attention flows on a randomly initialized model:
triples are encoded on their own, scored against the question, and the
winners are appended to every layer's keys and values.
"""

import itertools

import numpy as np

from kga import FusionConfig, KnowledgeGraph, Model, ModelConfig
from kga.fusion import encode_triple, kga_forward, score_candidates
from kga.model import forward, forward_lm
from kga.synth import question_prompt
from kga.vocab import Vocab, tokenize

# a toy graph and a vocabulary that covers it
kg = KnowledgeGraph.from_tuples([
    ("paris", "capital_of", "france"),
    ("berlin", "capital_of", "germany"),
    ("france", "currency", "euro"),
    ("paris", "twin_of", "rome"),
])
words = ["what", "is", "the", "of", "?", "(", ",", ")", "yes", "no"]
vocab = Vocab.from_texts(words + [kg.text(i) for i in range(len(kg))])
model = Model.init(ModelConfig(num_layers=2, model_dim=32, num_heads=4, ffn_dim=64,
                               vocab_size=len(vocab), max_seq_len=64, seed=0))

# each triple is run through the model alone, positions starting at 0,
# so its keys and values can be cached and reused for any question
encs = [encode_triple(model, tokenize(kg.text(i), vocab), i) for i in range(len(kg))]
print("triple 0 tokens:", vocab.decode(encs[0].tokens))
print("keys per layer:", [k.shape for k in encs[0].keys])

# with no triples the fused forward is the plain forward, bit for bit
prompt = question_prompt(vocab, "what is the capital_of of paris ?")
plain, _ = forward_lm(model, prompt)
empty = kga_forward(model, prompt, []).logits
print("empty graph identical:", np.array_equal(plain, empty))

# scoring: the question is run once without fusion, then every triple's
# queries look back over the question and are compared with the last token
_, states = forward(model, prompt)
for rec in score_candidates(model, states, encs, FusionConfig()):
    print(f"  triple {rec.triple_id} score {rec.score:+.4f}  per layer "
          f"{np.round(rec.layer_scores, 4)}  {kg.text(rec.triple_id)}")

# the top k are fused; the answer logits do not depend on candidate order
res = kga_forward(model, prompt, encs, FusionConfig(k=2))
print("selected:", res.selected)
worst = 0.0
for order in itertools.permutations(encs):
    worst = max(worst, np.abs(kga_forward(model, prompt, list(order), FusionConfig(k=2)).logits
                              - res.logits).max())
print(f"largest logit change over all {len(encs)}! orders: {worst:.1e}")
