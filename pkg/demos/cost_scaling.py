"""
Attention cost as the candidate pool grows
==========================================

Per decoded token, fused answering only pays for the ``k`` triples it keeps.
Flattening every candidate into the prompt pays for all of them.
"""

from kga import FusionConfig, Model, ModelConfig
from kga.harness import Runtime, icl_decode_cost, kga_decode_cost, zsl_decode_cost
from kga.synth import gen_synthetic_kgqa

data = gen_synthetic_kgqa(0, 200, 10, 1200, 1, hop=1, n_train=0)
model = Model.init(ModelConfig(2, 64, 4, 256, len(data.vocab), 8192, seed=0))
rt = Runtime(model, data.vocab, data.kg)
inst = data.instances[0]
others = [i for i in range(len(data.kg)) if i not in inst.gold]

base = zsl_decode_cost(rt, inst.question)
print(f"question alone: {base.step_flops[0]} flops per token, {base.peak_kv_bytes} kv bytes")
print(f"{'pool':>6} {'kga/token':>10} {'kga kv':>8} {'kga scoring':>12} "
      f"{'icl/token':>10} {'icl kv':>9}")
for size in (10, 100, 1000):
    pool = inst.gold + others[:size - 1]
    kga = kga_decode_cost(rt, inst.question, pool, FusionConfig(k=3))
    icl = icl_decode_cost(rt, inst.question, pool)
    print(f"{size:>6} {kga.step_flops[0]:>10} {kga.peak_kv_bytes:>8} {kga.score_flops:>12} "
          f"{icl.step_flops[0]:>10} {icl.peak_kv_bytes:>9}")

# scoring grows with the pool but happens once per question, before decoding,
# and the triple encodings themselves can be cached ahead of time
