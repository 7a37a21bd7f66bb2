import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gti_lab.corpus import (TEXT_TO_SID, InteractionDataset, SyntheticCatalog,
                            build_grounding_corpus, build_sft_corpus, generate_catalog,
                            generate_interactions, pretraining_corpus, prompt_length,
                            render_prompt, retrieval_examples)
from gti_lab.numerics import cosine
from gti_lab.rq import Assignment, SemanticID
from gti_lab.vocab import Vocabulary

V = Vocabulary(levels=2, size=4)


def span(seq, assistant: bool) -> bytes:
    cut = prompt_length(seq)
    ids = seq.ids[cut:] if assistant else seq.ids[:cut]
    return bytes(t for t in ids if t < 256)


@pytest.fixture(scope="module")
def small():
    cat = generate_catalog(40, depth=2, branching=4, dim=8, seed=1)
    sids = {it.item_id: SemanticID((it.path[0], n % 4)) for n, it in enumerate(cat.items)}
    return cat, Assignment(sids)


def test_zero_noise_leaf_clusters_are_identical():
    cat = generate_catalog(200, depth=2, branching=2, noise=0.0, seed=2)
    by_leaf = {}
    for it in cat.items:
        by_leaf.setdefault(it.path, []).append(it.z)
    for rows in by_leaf.values():
        for r in rows[1:]:
            np.testing.assert_array_equal(r, rows[0])


def test_same_top_cluster_is_more_similar():
    same, diff = [], []
    for seed in range(100):
        cat = generate_catalog(60, depth=3, branching=4, seed=seed, offset=0.0)
        items = cat.items
        a = items[0]
        s = next((b for b in items[1:] if b.path[0] == a.path[0]), None)
        d = next((b for b in items[1:] if b.path[0] != a.path[0]), None)
        if s is not None and d is not None:
            same.append(cosine(a.z, s.z))
            diff.append(cosine(a.z, d.z))
    assert np.mean(same) > np.mean(diff)


def test_catalog_is_deterministic_and_roundtrips(tmp_path):
    a = generate_catalog(30, seed=5)
    b = generate_catalog(30, seed=5)
    a.save(tmp_path / "a.jsonl")
    b.save(tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = SyntheticCatalog.load(tmp_path / "a.jsonl")
    np.testing.assert_array_equal(back.embeddings(), a.embeddings())
    assert [i.description for i in back.items] == [i.description for i in a.items]


def test_first_letter_of_kind_word_names_the_cluster():
    cat = generate_catalog(200, depth=2, branching=8, seed=0)
    letters = {}
    for it in cat.items:
        letters.setdefault(it.path[0], set()).add(it.description[0])
    assert all(len(v) == 1 for v in letters.values())
    assert len({next(iter(v)) for v in letters.values()}) == len(letters)


def test_affinity_one_keeps_users_in_home_leaf():
    cat = generate_catalog(64, depth=2, branching=2, seed=0)
    inter = generate_interactions(cat, 20, affinity=1.0, seed=1, home_level=None)
    paths = {it.item_id: it.path for it in cat.items}
    for u in inter.users():
        assert {paths[i] for i in inter.sequences[u]} == {inter.home[u]}


def test_affinity_zero_spreads_over_catalog():
    cat = generate_catalog(64, depth=2, branching=4, seed=0)
    inter = generate_interactions(cat, 200, affinity=0.0, seed=1, home_level=1)
    paths = {it.item_id: it.path for it in cat.items}
    hits = [paths[i][0] == inter.home[u][0] for u in inter.users() for i in inter.sequences[u]]
    # only chance agreement with one of four top clusters
    assert abs(np.mean(hits) - 0.25) < 0.1


def test_affinity_point_eight_majority_in_home():
    cat = generate_catalog(128, depth=4, branching=8, seed=0)
    inter = generate_interactions(cat, 100, affinity=0.8, seed=3, home_level=1)
    paths = {it.item_id: it.path for it in cat.items}
    share = [np.mean([paths[i][:1] == inter.home[u] for i in inter.sequences[u]])
             for u in inter.users()]
    assert np.mean([s > 0.5 for s in share]) > 0.8


def test_interactions_roundtrip(tmp_path):
    cat = generate_catalog(20, seed=0)
    inter = generate_interactions(cat, 5, seed=0)
    inter.save(tmp_path / "i.jsonl")
    back = InteractionDataset.load(tmp_path / "i.jsonl")
    assert back.sequences == inter.sequences and back.home == inter.home


def test_leave_one_out_targets():
    inter = InteractionDataset({"u": ["a", "b", "c", "d", "e"]})
    assert inter.targets("u", "test") == [4]
    assert inter.targets("u", "valid") == [3]
    assert inter.targets("u", "train") == [1, 2]


def test_title_template_literal():
    seq = render_prompt("titledesc2sid", {"title": "Red Dress", "description": "red",
                                          "sid": [V.sid_token(0, 1)]}, V)
    assert b"What item is called Red Dress" in span(seq, assistant=False)
    assert seq.ids[prompt_length(seq):] == [V.sid_token(0, 1), V.eos]


def test_sid_to_title_template():
    sid = [V.sid_token(0, 2), V.sid_token(1, 3)]
    seq = render_prompt("sid2title", {"title": "Blue Hat", "sid": sid}, V)
    prompt = seq.ids[:prompt_length(seq)]
    assert all(t in prompt for t in sid)
    assert span(seq, assistant=True) == b"Blue Hat"
    assert b"is called?" in span(seq, assistant=False)


def test_retrieval_template_wording():
    seq = render_prompt("retrieval1", {"inters": [V.sid_token(0, 0)], "sid": [V.sid_token(1, 1)]}, V)
    text = span(seq, assistant=False)
    assert b"The user has interacted with items " in text
    assert b" in chronological order" in text


def test_unbound_placeholder_raises():
    with pytest.raises(KeyError):
        render_prompt("sid2title", {"sid": []}, V)


def test_only_answer_carries_weight():
    seq = render_prompt("sid2desc", {"description": "abc", "sid": [V.sid_token(0, 0)]}, V)
    cut = prompt_length(seq)
    assert not any(seq.weights[:cut]) and all(seq.weights[cut:])


def test_grounding_counts_and_ranges(small):
    cat, amap = small
    bi = build_grounding_corpus(cat, amap, V, bidirectional=True)
    uni = build_grounding_corpus(cat, amap, V, bidirectional=False)
    assert len(bi) == 2 * len(cat.items)
    assert len(uni) == len(cat.items)
    assert {e.direction for e in uni} == {"text->sid"}
    for ex in bi:
        new = [t for t in ex.ids if t >= V.n_text]
        assert new and all(t in V.sid_range for t in new)


def test_grounding_templates_round_robin(small):
    cat, amap = small
    uni = build_grounding_corpus(cat, amap, V, bidirectional=False)
    markers = [b"has the title", b"described as", b"is called"]
    for n, ex in enumerate(uni[:9]):
        assert markers[n % 3] in span(ex.seq, assistant=False), TEXT_TO_SID[n % 3]


def test_grounding_missing_sid_raises(small):
    cat, amap = small
    partial = Assignment(dict(list(amap.sids.items())[1:]))
    with pytest.raises(KeyError):
        build_grounding_corpus(cat, partial, V)


def test_sft_modes(small):
    cat, amap = small
    inter = generate_interactions(cat, 12, seed=0)
    vanilla = build_sft_corpus(inter, amap, V, "vanilla")
    multi = build_sft_corpus(inter, amap, V, "multitask", catalog=cat)
    assert all(hasattr(ex, "target") for ex in vanilla)
    n_ret = sum(hasattr(ex, "target") for ex in multi)
    n_align = len(multi) - n_ret
    assert n_ret == len(vanilla) and abs(n_ret - n_align) <= 1


def test_retrieval_targets_follow_split(small):
    cat, amap = small
    inter = generate_interactions(cat, 12, seed=0)
    for split in ("train", "valid", "test"):
        for ex in retrieval_examples(inter, amap, V, split):
            seq = inter.sequences[ex.user]
            assert ex.target in [seq[t] for t in inter.targets(ex.user, split)]
            target_ids = ex.ids[prompt_length(ex.seq):-1]
            assert target_ids == V.sid_tokens(amap.sids[ex.target])


def test_retrieval_history_is_capped(small):
    cat, amap = small
    inter = generate_interactions(cat, 12, seq_len_range=(7, 7), seed=0)
    for ex in retrieval_examples(inter, amap, V, "test", max_history=2):
        prompt = ex.ids[:prompt_length(ex.seq)]
        assert sum(t in V.sid_range for t in prompt) == 2 * V.levels


def test_pretraining_corpus_is_text_only(small):
    cat, _ = small
    corpus = pretraining_corpus(cat, V)
    assert all(t < V.n_text for s in corpus for t in s.ids)
    assert all(all(s.weights) for s in corpus)


@given(st.integers(0, 500))
def test_catalog_paths_within_branching(seed):
    cat = generate_catalog(10, depth=3, branching=5, seed=seed)
    assert all(0 <= c < 5 for it in cat.items for c in it.path)
    assert len({it.item_id for it in cat.items}) == 10
