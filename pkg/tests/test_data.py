import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itdd.data import (Conversation, CorpusError, Turn, collate, corpus_examples, encode_example, load_corpus,
                       make_batches, make_examples, merge_consecutive, tokenize, write_corpus)
from itdd.nn import ConfigError
from itdd.synth import answer_from_document, fact_pools, gen_fact_copy_task
from itdd.vocab import BOS_TOKEN, EOS_TOKEN, SPECIALS, UNK, Vocab, build_vocab


def conv(*pairs, docs=None):
    return Conversation([Turn(s, t, "d0") for s, t in pairs], docs or {"d0": "some document"})


def test_merge_reproduces_reference_example():
    out = merge_consecutive(conv(("A", "Hello!"), ("B", "Hi!"), ("B", "How's it going?")))
    assert [(t.speaker, t.text) for t in out.turns] == [("A", "Hello!"), ("B", "Hi! How's it going?")]


def test_merge_run_of_three_keeps_first_document():
    c = Conversation([Turn("A", "x", "d1"), Turn("A", "y", "d2"), Turn("A", "z", "d2")], {"d1": "a", "d2": "b"})
    out = merge_consecutive(c)
    assert [(t.text, t.doc) for t in out.turns] == [("x y z", "d1")]


speaker_runs = st.lists(st.tuples(st.sampled_from("AB"), st.text("abc !", min_size=1, max_size=6)), max_size=12)


@settings(max_examples=50, deadline=None)
@given(speaker_runs)
def test_merge_idempotent_and_alternating(pairs):
    once = merge_consecutive(conv(*pairs))
    twice = merge_consecutive(once)
    assert once == twice
    assert all(a.speaker != b.speaker for a, b in zip(once.turns, once.turns[1:]))
    # fold oracle: joining texts of each run with single spaces
    runs = []
    for s, t in pairs:
        if runs and runs[-1][0] == s:
            runs[-1] = (s, runs[-1][1] + " " + t)
        else:
            runs.append((s, t))
    assert [(t.speaker, t.text) for t in once.turns] == runs


@pytest.mark.parametrize("text,tokens", [
    ("Hello!", ["hello", "!"]),
    ("", []),
    ("rotten tomatoes: 81%", ["rotten", "tomatoes", ":", "81%"]),
    ("It's \"great\".", ["it", "'", "s", '"', "great", '"', "."]),
])
def test_tokenize(text, tokens):
    assert tokenize(text) == tokens


def test_vocab_basics():
    v = build_vocab([["a", "a", "a"]])
    assert len(v) == 5 and v.itos[:4] == list(SPECIALS)
    tie = build_vocab([["b", "a"]])
    assert tie.id("a") < tie.id("b")
    assert v.id("zzz") == UNK
    with pytest.raises(ValueError):
        build_vocab([])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.sampled_from(list("abcdefg")), max_size=8), min_size=1),
       st.integers(1, 3), st.one_of(st.none(), st.integers(0, 5)))
def test_vocab_matches_counter_oracle(corpus, min_count, max_size):
    counts = Counter(t for seq in corpus for t in seq)
    if not counts:
        with pytest.raises(ValueError):
            build_vocab(corpus, min_count, max_size)
        return
    v = build_vocab(corpus, min_count, max_size)
    kept = sorted((t for t in counts if counts[t] >= min_count), key=lambda t: (-counts[t], t))[:max_size]
    assert v.itos == list(SPECIALS) + kept
    assert all(v.token(v.id(t)) == t for t in kept)


def test_vocab_decode_strips_specials():
    v = Vocab(list(SPECIALS) + ["x", "y"])
    assert v.decode([2, 4, 5, 3, 4]) == ["x", "y"]
    assert v.decode([2, 4], strip=False) == [BOS_TOKEN, "x"]


def test_make_examples_window_arithmetic():
    c = conv(*[("AB"[i % 2], f"t{i}") for i in range(5)])
    exs = make_examples(c, window=3)
    assert len(exs) == 4
    assert exs[0].context == [["t0"]]
    assert exs[3].context == [["t1"], ["t2"], ["t3"]]
    assert exs[3].target == [BOS_TOKEN, "t4", EOS_TOKEN]
    assert exs[3].target_doc == ["some", "document"]
    assert make_examples(conv(("A", "one")), 3) == []


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 10), w=st.integers(1, 4))
def test_example_count_and_context_sizes(n, w):
    exs = make_examples(conv(*[("AB"[i % 2], f"w{i}") for i in range(n)]), window=w)
    assert len(exs) == n - 1
    assert [len(e.context) for e in exs] == [min(k, w) for k in range(1, n)]


def test_length_caps_apply():
    c = Conversation([Turn("A", "a b c d", "d"), Turn("B", "e f g", "d")], {"d": "p q r s t"})
    ex = make_examples(c, 3, max_utt_len=2, max_doc_len=3)[0]
    assert ex.context == [["a", "b"]] and ex.target == [BOS_TOKEN, "e", "f", EOS_TOKEN]
    assert ex.target_doc == ["p", "q", "r"]


def test_batches_group_by_context_size():
    convs = gen_fact_copy_task(0, 10, 3, 32)
    exs = corpus_examples(convs, 3)
    vocab = build_vocab(t for e in exs for t in e.context + [e.target])
    enc = [encode_example(e, vocab) for e in exs]
    batches = make_batches(enc, 4, np.random.default_rng(0))
    assert sum(b.size for b in batches) == len(enc)
    assert all(b.size <= 4 for b in batches)
    with pytest.raises(ValueError):
        collate([enc[0], enc[2]])


def test_jsonl_round_trip(tmp_path):
    convs = gen_fact_copy_task(3, 5, 3, 40) + [
        Conversation([Turn("A", "Ünïcode \"quoted\"", None), Turn("B", "x", "k")], {"k": "doc"})
    ]
    path = tmp_path / "c.jsonl"
    write_corpus(convs, path)
    assert load_corpus(path) == convs


def test_load_errors_carry_line_numbers(tmp_path):
    good = json.dumps({"turns": [{"speaker": "A", "text": "hi", "doc": None}], "docs": {}})
    path = tmp_path / "bad.jsonl"
    path.write_text(good + "\n{not json\n")
    with pytest.raises(CorpusError, match=":2:"):
        load_corpus(path)
    path.write_text(json.dumps({"turns": [{"speaker": "A", "text": "hi"}], "docs": {}}) + "\n")
    with pytest.raises(CorpusError, match="doc"):
        load_corpus(path)
    path.write_text(json.dumps({"turns": [{"speaker": "C", "text": "hi", "doc": None}], "docs": {}}) + "\n")
    with pytest.raises(CorpusError, match="speaker"):
        load_corpus(path)
    path.write_text(json.dumps({"turns": [{"speaker": "A", "text": "hi", "doc": "x"}], "docs": {}}) + "\n")
    with pytest.raises(CorpusError, match="document id"):
        load_corpus(path)


def test_load_accepts_extra_fields_and_empty_file(tmp_path, caplog):
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps({"turns": [{"speaker": "A", "text": "hi", "doc": None, "x": 1}],
                                "docs": {}, "meta": "ignored"}) + "\n")
    assert len(load_corpus(path)) == 1
    path.write_text("")
    assert load_corpus(path) == []
    assert "empty" in caplog.text


def test_fact_copy_deterministic_and_answerable():
    a = gen_fact_copy_task(7, 20, 4, 64)
    assert a == gen_fact_copy_task(7, 20, 4, 64)
    assert a != gen_fact_copy_task(8, 20, 4, 64)
    for c in a:
        doc = c.docs["facts"]
        for q, ans in zip(c.turns[::2], c.turns[1::2]):
            assert answer_from_document(q.text, doc) == ans.text


def test_fact_copy_pools_disjoint_and_errors():
    keys, values = fact_pools(64)
    assert not set(keys) & set(values)
    with pytest.raises(ConfigError):
        gen_fact_copy_task(0, 1, n_facts=1)
    with pytest.raises(ConfigError):
        gen_fact_copy_task(0, 1, n_facts=4, vocab_size=10)


def test_fact_copy_values_near_uniform():
    # no corpus-level shortcut: answer frequencies close to uniform over the value pool
    _, values = fact_pools(24)
    counts = Counter(t.text for c in gen_fact_copy_task(1, 2000, 2, 24) for t in c.turns[1::2])
    assert set(counts) == set(values)
    expected = 4000 / len(values)
    assert max(abs(n - expected) for n in counts.values()) < 5 * np.sqrt(expected)


def test_fact_copy_ordered_questions_follow_the_document():
    for conv in gen_fact_copy_task(3, 5, n_facts=3, vocab_size=20, shuffle_questions=False):
        keys = [fact.split()[0] for fact in conv.docs["facts"].split(";")]
        asked = [t.text.split()[2] for t in conv.turns if t.speaker == "A"]
        assert asked == keys
        assert all(t.doc is None for t in conv.turns if t.speaker == "A")
