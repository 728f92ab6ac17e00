from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flarelab.autodiff import ContractError
from flarelab.data import (DEFAULT_SIZES, MAX_ANSWER_LEN, QUERY_ID, RESERVED_IDS, CipherLanguage, MtStandin,
                           TaskInstance, apply_cipher, default_languages, english_splits,
                           generate_task_corpus, keyword_ids, load_corpus, low_resource_subsample,
                           make_parallel_splits, read_jsonl, save_corpus, save_splits, terminal_ids)


def independent_label(tokens):
    """Majority keyword, recomputed without the library's helpers."""
    counts = {k: 0 for k in (4, 5, 6)}
    for t in tokens:
        if t in counts:
            counts[t] += 1
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])
    if ranked[0][1] == 0 or ranked[0][1] == ranked[1][1]:
        return None
    return ranked[0][0] - 4


def independent_span(tokens):
    q = tokens.index(3)
    for j in range(q + 1, len(tokens)):
        if 52 <= tokens[j] <= 63:
            return (q + 1, j)
    return None


def test_corpus_is_seeded():
    assert generate_task_corpus("span", 50, seed=3) == generate_task_corpus("span", 50, seed=3)
    assert generate_task_corpus("span", 50, seed=3) != generate_task_corpus("span", 50, seed=4)


def test_classification_labels_match_rule_oracle():
    corpus = generate_task_corpus("classification", 3000, seed=0)
    assert all(independent_label(inst.tokens) == inst.label for inst in corpus)
    counts = Counter(inst.label for inst in corpus)
    assert set(counts) == {0, 1, 2}


def test_span_answers_match_rule_oracle():
    corpus = generate_task_corpus("span", 3000, seed=0)
    for inst in corpus:
        s, e = inst.span
        assert independent_span(list(inst.tokens)) == (s, e)
        assert inst.tokens[s - 1] == QUERY_ID and 0 <= e - s < MAX_ANSWER_LEN


def test_corpus_rejects_empty():
    with pytest.raises(ContractError):
        generate_task_corpus("span", 0, seed=0)


@given(st.integers(0, 10_000))
def test_cipher_is_bijection_fixing_reserved(seed):
    lang = CipherLanguage.create("x", 0.0, seed)
    fwd, inv = lang.forward_map, lang.inverse_map
    np.testing.assert_array_equal(inv[fwd], np.arange(64))
    assert sorted(fwd.tolist()) == list(range(64))
    assert all(fwd[r] == r for r in RESERVED_IDS)


@given(st.integers(0, 500), st.sampled_from(["classification", "span"]))
def test_exact_round_trip(seed, task):
    lang = CipherLanguage.create("x", 0.0, seed)
    for inst in generate_task_corpus(task, 5, seed=seed):
        there = apply_cipher(lang, inst, "to_target", 1.0, seed)
        back = apply_cipher(lang, there, "to_source", 1.0, seed)
        assert back.tokens == inst.tokens and back.label == inst.label and back.span == inst.span
        again = apply_cipher(lang, back, "to_target", 1.0, seed)
        assert again.tokens == there.tokens


def test_quality_mismatch_rate_matches_bernoulli():
    lang = CipherLanguage.create("x", 0.0, 1)
    corpus = generate_task_corpus("classification", 800, seed=2)
    wrong = total = 0
    for inst in corpus:
        exact = np.asarray(apply_cipher(lang, inst, "to_target", 1.0, 0).tokens)
        noisy = np.asarray(apply_cipher(lang, inst, "to_target", 0.9, 0).tokens)
        content = np.asarray(inst.tokens) >= 4
        wrong += int(np.sum(exact[content] != noisy[content]))
        total += int(content.sum())
    assert total >= 10_000
    assert abs(wrong / total - 0.1) <= 0.02


def test_reserved_ids_never_move():
    lang = CipherLanguage.create("x", 0.5, 1)
    for inst in generate_task_corpus("span", 300, seed=5):
        out = apply_cipher(lang, inst, "to_target", 0.7, 9)
        for pos, tok in enumerate(inst.tokens):
            if tok in RESERVED_IDS:
                assert out.tokens[pos] == tok


def test_direction_contract():
    lang = CipherLanguage.create("x", 0.0, 1)
    inst = generate_task_corpus("span", 1, seed=0)[0]
    with pytest.raises(ContractError):
        apply_cipher(lang, inst, "to_source", 1.0, 0)


@pytest.mark.parametrize("swap_rate", [0.1, 0.3, 0.6])
def test_span_reprojection_exhaustive(swap_rate):
    lang = CipherLanguage.create("x", swap_rate, 4)
    inv = lang.inverse_map
    invalid = 0
    for inst in generate_task_corpus("span", 2000, seed=6):
        out = apply_cipher(lang, inst, "to_target", 1.0, 11)
        s, e = out.span
        if not out.valid:
            invalid += 1
            continue
        answer = [int(inv[t]) for t in out.tokens[s:e + 1]]
        original = list(inst.tokens[s:e + 1])
        assert sorted(answer) == sorted(original)  # swaps inside the span only reorder it
        untouched = [int(inv[t]) for t in out.tokens[max(s - 1, 0):e + 2]]
        if untouched == list(inst.tokens[max(s - 1, 0):e + 2]):
            assert answer == original
    assert 0 < invalid < 2000


def test_parallel_splits_sizes_and_disjointness():
    corpus = generate_task_corpus("classification", 600, seed=0)
    lang = default_languages()[1]
    sizes = {"train": 300, "validation": 100, "test": 150}
    splits = make_parallel_splits(corpus, lang, 0.9, 0.9, sizes, seed=0)
    assert [len(splits.train), len(splits.validation), len(splits.test)] == [300, 100, 150]
    ids = [{p.id for p in part} for _, part in splits.items()]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    for _, part in splits.items():
        assert all(p.source.label == p.target.label for p in part)
    english = english_splits(corpus, sizes, seed=0)
    assert [i.id for i in english["test"]] == [p.id for p in splits.test]
    with pytest.raises(ContractError):
        make_parallel_splits(corpus, lang, 0.9, 0.9, {"train": 600, "validation": 1, "test": 0}, seed=0)


def test_exact_splits_match_cipher_and_translate_test_oracle():
    corpus = generate_task_corpus("span", 300, seed=1)
    lang = CipherLanguage.create("c00", 0.0, 1234)
    splits = make_parallel_splits(corpus, lang, 1.0, 1.0, {"train": 100, "validation": 50, "test": 100}, 0)
    for p in splits.train:
        assert p.target.tokens == tuple(int(t) for t in lang.forward_map[list(p.source.tokens)])
    english = {i.id: i for i in english_splits(corpus, {"train": 100, "validation": 50, "test": 100}, 0)["test"]}
    for p in splits.test:
        assert p.source.tokens == english[p.id].tokens


def test_low_resource_subsample():
    corpus = generate_task_corpus("classification", 500, seed=0)
    sub = low_resource_subsample(corpus, 100, seed=3)
    assert len(sub) == 100 and sub == low_resource_subsample(corpus, 100, seed=3)
    counts = Counter(i.label for i in sub).values()
    assert max(counts) - min(counts) <= 1
    assert low_resource_subsample(corpus, 500, seed=1) == corpus
    with pytest.raises(ContractError):
        low_resource_subsample(corpus, 501, seed=1)


def test_jsonl_round_trip(tmp_path):
    corpus = generate_task_corpus("span", 20, seed=0)
    save_corpus(tmp_path / "c.jsonl", corpus, provenance="gold")
    assert load_corpus(tmp_path / "c.jsonl") == corpus
    header, records = read_jsonl(tmp_path / "c.jsonl")
    assert header["schema_version"] == 1 and records[0]["provenance"] == "gold"
    lang = default_languages()[0]
    splits = make_parallel_splits(generate_task_corpus("span", 30, 0), lang, 0.9, 0.9,
                                  {"train": 10, "validation": 10, "test": 10}, 0)
    save_splits(tmp_path / "s", splits)
    _, recs = read_jsonl(tmp_path / "s" / "train.jsonl")
    assert len(recs) == 20 and {r["side"] for r in recs} == {"source", "target"}


def test_defaults():
    assert DEFAULT_SIZES["classification"] == {"train": 2000, "validation": 300, "test": 500}
    assert [lang.swap_rate for lang in default_languages()] == [0.0, 0.1, 0.3]
    assert MtStandin(default_languages()[0], 1.0).quality == 1.0
    assert keyword_ids().tolist() == [4, 5, 6] and terminal_ids(64).tolist() == list(range(52, 64))
    assert TaskInstance.from_record(TaskInstance(1, (1, 2), "en", span=(0, 1)).to_record()).span == (0, 1)
