import numpy as np
import pytest

from kga.fusion import ContractError, FusionConfig
from kga.harness import (Runtime, baseline_strategies, icl_decode_cost, kga_decode_cost,
                         module_disabled_scores, recall_report, run_pipeline, trace_records,
                         zsl_decode_cost)
from kga.kg import KnowledgeGraph
from kga.model import Model, ModelConfig
from kga.synth import (GenerationError, QAInstance, gen_synthetic_kgqa, icl_prompt,
                       question_text, to_training_sequence)


@pytest.fixture(scope="module")
def data():
    return gen_synthetic_kgqa(5, 40, 6, 160, 12, hop=2, n_train=50, max_context=6)


@pytest.fixture(scope="module")
def rt(data):
    cfg = ModelConfig(2, 16, 2, 32, len(data.vocab), 512, seed=1)
    return Runtime(Model.init(cfg), data.vocab, data.kg)


def test_one_hop_instances():
    d = gen_synthetic_kgqa(1, 30, 4, 60, 10, hop=1, n_train=5)
    for inst in d.instances:
        assert len(inst.gold) == 1
        t = d.kg[inst.gold[0]]
        assert inst.question == question_text([t.relation], t.head)
        assert inst.answer == t.tail and inst.anchor == t.head


def test_two_hop_instances_chain(data):
    for inst in data.instances:
        a, b = (data.kg[i] for i in inst.gold)
        assert len(inst.gold) == 2 and a.tail == b.head and inst.answer == b.tail
        assert set(inst.gold) <= set(inst.candidates)
    used = [g for inst in data.instances for g in inst.gold]
    assert len(used) == len(set(used))


def test_same_seed_same_dataset(data):
    again = gen_synthetic_kgqa(5, 40, 6, 160, 12, hop=2, n_train=50, max_context=6)
    assert [i.to_dict() for i in again.instances] == [i.to_dict() for i in data.instances]
    assert again.corpus == data.corpus
    assert again.vocab.itos == data.vocab.itos


def test_unique_head_relation_pairs(data):
    pairs = [(t.head, t.relation) for t in data.kg.triples]
    assert len(pairs) == len(set(pairs))


def test_generation_errors():
    with pytest.raises(GenerationError):
        gen_synthetic_kgqa(0, 3, 1, 10, 1)
    with pytest.raises(GenerationError):
        gen_synthetic_kgqa(0, 30, 4, 60, 10, hop=3)
    with pytest.raises(GenerationError):
        gen_synthetic_kgqa(0, 30, 4, 60, 1000)


def test_training_sequences(data):
    answer_items = [c for c in data.corpus if c.labels is None]
    judged = [c for c in data.corpus if c.labels is not None]
    assert answer_items and judged
    seq = to_training_sequence(data.vocab, answer_items[0])
    toks = seq.tokens.tolist()
    sep = toks.index(data.vocab.sep_id)
    assert seq.positions[sep] == 0
    assert data.vocab.decode(toks[seq.loss_mask.nonzero()[0][0] + 1:]).split()[0] == \
        answer_items[0].answer
    seq = to_training_sequence(data.vocab, judged[0])
    targets = [data.vocab.itos[t] for t in seq.tokens[1:][seq.loss_mask]]
    assert targets == ["yes" if y else "no" for y in judged[0].labels]


def test_icl_prompt_positions(data):
    toks, pos = icl_prompt(data.vocab, ["(e1, r0, e2)", "(e3, r1, e4)"], "what is the r0 of e1 ?")
    assert len(toks) == len(pos) and pos[:3] == [0, 1, 2] and pos[14] == 0


def test_pipeline_modes(rt, data):
    inst = data.instances[:3]
    for mode in ("zsl", "icl", "kga", "cross"):
        report, preds = run_pipeline(mode, rt, inst)
        assert report.n_instances == 3 and len(preds) == 3
        assert report.peak_kv_bytes > 0
    with pytest.raises(ContractError):
        run_pipeline("oracle", rt, inst)


def test_report_formats(rt, data):
    report, _ = run_pipeline("kga", rt, data.instances[:2], seed=9)
    kv = dict(line.split("=", 1) for line in report.to_keyvalue(timing=False).splitlines())
    assert kv["seed"] == "9" and kv["mode"] == "kga" and "seconds_per_instance" not in kv
    assert {"flops.score", "flops.prefill"} <= set(kv)
    assert "accuracy" in report.to_table()


def test_zsl_cost_ignores_candidates(rt, data):
    a, _ = run_pipeline("zsl", rt, data.instances[:2])
    trimmed = [QAInstance(i.id, i.question, i.answer, i.gold, i.gold) for i in data.instances[:2]]
    b, _ = run_pipeline("zsl", rt, trimmed)
    assert a.flops == b.flops


def test_missing_candidate_is_contract_error(rt):
    with pytest.raises(ContractError):
        rt.encodings([10**6])


def test_strategies(rt, data):
    inst = data.instances[:4]
    ranks = baseline_strategies(rt, inst, seed=0)
    for name in ("inward", "module-disabled", "random"):
        for r, i in zip(ranks[name], inst):
            assert sorted(r) == sorted(i.candidates)
    other = baseline_strategies(rt, inst, seed=1)
    assert any(a != b for a, b in zip(ranks["random"], other["random"]))


def test_pool_of_one(rt, data):
    i = data.instances[0]
    one = [QAInstance(0, i.question, i.answer, i.gold[:1], i.gold[:1])]
    ranks = baseline_strategies(rt, one)
    assert ranks["inward"] == ranks["module-disabled"] == ranks["random"] == [i.gold[:1]]


def test_module_disabled_matches_recomputation(rt, data):
    inst = data.instances[0]
    prompt = rt.prompt(inst.question)
    encs = rt.encodings(inst.candidates)
    got = module_disabled_scores(rt.model, prompt, encs)
    E = rt.model.params["tok_emb"]
    for e in encs:
        q = np.zeros(E.shape[1])
        for t in prompt:
            q += E[t]
        q /= len(prompt)
        z = sum(E[t] for t in e.tokens) / len(e.tokens)
        assert abs(got[e.triple_id] - float(z @ q)) <= 1e-10


def test_recall_report(rt, data):
    rep = recall_report(rt, data.instances, alphas=(1, 3))
    assert set(rep.recall) == {"inward", "module-disabled", "random", "random-expected"}
    for curve in rep.recall.values():
        assert curve[0] <= curve[1] <= 1.0


def test_trace_records_cardinality(rt, data):
    inst = data.instances[:2]
    recs = trace_records(rt, inst)
    assert len(recs) == sum(len(i.candidates) for i in inst) * 2


def test_decode_costs(rt, data):
    inst = data.instances[0]
    zsl = zsl_decode_cost(rt, inst.question)
    kga = kga_decode_cost(rt, inst.question, inst.candidates, FusionConfig(k=2))
    icl = icl_decode_cost(rt, inst.question, inst.candidates)
    assert len(zsl.step_flops) == 4
    assert zsl.step_flops[0] < kga.step_flops[0] < icl.step_flops[0]
    for c in (zsl, kga, icl):
        assert c.peak_kv_bytes == c.kv_formula_bytes
