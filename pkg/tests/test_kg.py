import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kga.kg import (EmptyGraphError, KnowledgeGraph, Triple, UnknownEntityError, ingest_tsv,
                    jaccard, link_entity, normalize, retrieve_candidates, trigrams,
                    triple_to_text)


def bfs_candidates(rows, anchor, hops):
    """Breadth-first reference: entities within hops-1 steps, then their edges."""
    frontier, seen = {anchor}, {anchor}
    for _ in range(hops - 1):
        nxt = set()
        for h, _, t in rows:
            if h in frontier:
                nxt.add(t)
            if t in frontier:
                nxt.add(h)
        frontier = nxt - seen
        seen |= nxt
    return sorted(i for i, (h, _, t) in enumerate(rows) if h in seen or t in seen)


def test_ingest_single_line(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text("a\tr\tb\n")
    kg = ingest_tsv(p)
    assert len(kg) == 1 and kg[0] == Triple(0, "a", "r", "b")


def test_ingest_skips_malformed_and_keeps_duplicates(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text("a\tr\tb\nonly\ttwo\na\tr\tb\n\n")
    kg = ingest_tsv(p)
    assert kg.malformed == 1
    assert [t.id for t in kg.triples] == [0, 1]
    assert kg.text(0) == kg.text(1)


def test_ingest_errors(tmp_path):
    with pytest.raises(OSError):
        ingest_tsv(tmp_path / "missing.tsv")
    p = tmp_path / "bad.tsv"
    p.write_text("x\ty\n")
    with pytest.raises(EmptyGraphError):
        ingest_tsv(p)


def test_triple_text_form():
    assert triple_to_text(Triple(0, "NeurIPS_2025", "held_in", "San Diego")) == \
        "(NeurIPS_2025, held_in, San Diego)"
    assert triple_to_text(Triple(1, "a", "r", "b")) == "(a, r, b)"
    assert triple_to_text(Triple(2, "new  york", "r", "b")) == "(new  york, r, b)"
    with pytest.raises(ValueError):
        Triple(3, " ", "r", "b")


def test_link_entity_examples():
    kg = KnowledgeGraph.from_tuples([("nips 2025", "held_in", "x"),
                                     ("acl 2025", "held_in", "y")])
    ent, score = link_entity("where is nips 2025 held", kg)
    # padded trigram sets: 9 shared out of 23 for "nips 2025", 4 of 27 for "acl 2025"
    assert ent == "nips 2025" and score == pytest.approx(9 / 23, abs=1e-15)


def test_link_entity_verbatim_formula():
    kg = KnowledgeGraph.from_tuples([("paris", "capital_of", "france")])
    ent, score = link_entity("tell me about paris", kg)
    # "france" shares no trigram with the question, so "paris" wins alone
    assert ent == "paris"
    assert score == len(trigrams("paris")) / len(trigrams("tell me about paris"))


def test_link_entity_zero_overlap_tie():
    kg = KnowledgeGraph.from_tuples([("bb", "r", "aa")])
    assert link_entity("zzzz", kg) == ("aa", 0.0)
    with pytest.raises(ValueError):
        link_entity("   ", kg)


@given(st.text(alphabet="abc XYZ", min_size=1, max_size=20).filter(lambda s: s.strip()))
def test_link_entity_ignores_case_and_spacing(q):
    kg = KnowledgeGraph.from_tuples([("ab c", "r", "xyz"), ("ca", "r", "zz")])
    assert link_entity(q, kg) == link_entity("  " + q.upper().replace(" ", "   "), kg)


def test_normalize_and_jaccard():
    assert normalize("  Hello,   World!! ") == "hello, world"
    assert jaccard(set(), set()) == 0.0
    assert jaccard({"a"}, {"a", "b"}) == 0.5


def test_retrieve_star_and_chain():
    star = KnowledgeGraph.from_tuples([("c", "r", f"s{i}") for i in range(4)])
    assert retrieve_candidates("c", star, 1) == [0, 1, 2, 3]
    chain = KnowledgeGraph.from_tuples([("a", "r", "b"), ("b", "r", "c")])
    assert retrieve_candidates("a", chain, 1) == [0]
    assert retrieve_candidates("a", chain, 2) == [0, 1]
    with pytest.raises(UnknownEntityError):
        retrieve_candidates("zz", chain, 1)
    with pytest.raises(ValueError):
        retrieve_candidates("a", chain, 3)


def test_retrieve_matches_bfs_on_random_graph():
    g = np.random.default_rng(3)
    rows = [(f"n{g.integers(20)}", f"r{g.integers(3)}", f"n{g.integers(20)}")
            for _ in range(50)]
    kg = KnowledgeGraph.from_tuples(rows)
    for anchor in sorted(kg.entities):
        one, two = (retrieve_candidates(anchor, kg, h) for h in (1, 2))
        assert one == bfs_candidates(rows, anchor, 1)
        assert two == bfs_candidates(rows, anchor, 2)
        assert set(one) <= set(two)


def test_indices_resolve(small_kg):
    for ent, ids in small_kg.by_head.items():
        assert all(small_kg[i].head == ent for i in ids)
    for ent, ids in small_kg.by_tail.items():
        assert all(small_kg[i].tail == ent for i in ids)
    assert '"relation": "r0"' in small_kg.to_json()
