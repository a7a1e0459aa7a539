import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convmfit.corpus import (
    BOS_ID,
    DEFAULT_LABEL_MIX,
    EOS_ID,
    LABELS,
    PAD_ID,
    RESERVED,
    SEP,
    UNK_ID,
    Dialogue,
    SyntheticConfig,
    Triple,
    Turn,
    Utterance,
    Vocab,
    build_lexicon,
    build_triples,
    build_vocab,
    conversation_pairs,
    encode_batch,
    encode_sequences,
    generate_synthetic_corpus,
    read_dialogues,
    split_dataset,
    split_dialogues,
    tokenize,
    write_dialogues,
)


def _dialogue(*turns, did="d0"):
    out = []
    for role, texts in turns:
        utts = []
        for t in texts:
            text, labels = (t, None) if isinstance(t, str) else t
            utts.append(Utterance(text, role, labels))
        out.append(Turn(role, tuple(utts)))
    return Dialogue(did, tuple(out))


# -- data model ------------------------------------------------------------------------

def test_counselor_cannot_carry_labels():
    with pytest.raises(ValueError):
        Utterance("hi", "counselor", ("Fact",))


def test_labeled_utterance_needs_a_label():
    with pytest.raises(ValueError):
        Utterance("hi", "client", ())
    with pytest.raises(ValueError):
        Utterance("hi", "client", ("Nope",))
    assert Utterance("hi", "client", ("Fact", "Proc")).labels == ("Fact", "Proc")


def test_turn_role_consistency():
    with pytest.raises(ValueError):
        Turn("client", (Utterance("a", "counselor"),))
    with pytest.raises(ValueError):
        Turn("client", ())


def test_dialogue_nonempty():
    with pytest.raises(ValueError):
        Dialogue("x", ())


def test_dialogue_file_roundtrip(tmp_path):
    dialogues = generate_synthetic_corpus(SyntheticConfig(n_dialogues=5, labeled_fraction=0.5, seed=3))
    path = tmp_path / "d.jsonl"
    write_dialogues(path, dialogues)
    assert read_dialogues(path) == dialogues
    first = path.read_text(encoding="utf-8").splitlines()[0]
    assert first.startswith('{"id": "d00000", "turns": [')


# -- tokenize -----------------------------------------------------------------------------

@pytest.mark.parametrize("text,expected", [
    ("hello?", ["hello", "?"]),
    ("age # , female", ["age", "#", ",", "female"]),
    ("", []),
    ("hi [NAME] !!", ["hi", "[NAME]", "!", "!"]),
    ("call ### now", ["call", "###", "now"]),
    ("ok😀", ["ok", "😀"]),
])
def test_tokenize_examples(text, expected):
    assert tokenize(text) == expected


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40))
def test_tokenize_total_and_idempotent(text):
    toks = tokenize(text)
    assert tokenize(" ".join(toks)) == toks


# -- vocab --------------------------------------------------------------------------------

def test_build_vocab_examples(tmp_path):
    corpus = [["a", "a", "b"]]
    v = build_vocab(corpus)
    assert v.stoi["a"] == 5 and v.stoi["b"] == 6
    assert tuple(v.itos[:5]) == RESERVED
    v2 = build_vocab(corpus, min_count=2)
    assert v2.id("b") == UNK_ID and v2.id("a") == 5
    path = tmp_path / "vocab.tsv"
    v.save(path)
    loaded = Vocab.load(path)
    assert loaded.stoi == v.stoi and loaded.freqs == v.freqs
    assert loaded.content_hash() == v.content_hash()
    assert path.read_text(encoding="utf-8").splitlines()[5] == "a\t5\t2"


def test_build_vocab_max_size_and_empty():
    v = build_vocab([["a", "a", "b", "c", "c", "c"]], max_size=2)
    assert v.itos[5:] == ["c", "a"]
    with pytest.raises(ValueError):
        build_vocab([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from(list("abcdefgh")), max_size=8), min_size=1, max_size=8))
def test_vocab_bijective(corpus):
    v = build_vocab(corpus)
    assert len(set(v.itos)) == len(v.itos)
    assert all(v.stoi[t] == i for i, t in enumerate(v.itos))


# -- triples --------------------------------------------------------------------------------

def test_triples_example():
    d = _dialogue(("counselor", ["u1"]), ("client", [("c1", ("Fact",)), ("c2", ("Prob", "Proc"))]))
    ts = build_triples(d)
    assert [(t.counselor, t.context, t.target) for t in ts] == [
        (("u1",), (), ("c1",)),
        (("u1",), ("c1",), ("c2",)),
    ]
    assert ts[1].labels == (0, 0, 1, 0, 1)
    assert ts[1].label_names == ["Prob", "Proc"]


def test_triples_client_first_has_empty_counselor():
    d = _dialogue(("client", [("x", ("Anec",))]), ("counselor", ["q"]), ("client", [("y", ("Fact",))]))
    ts = build_triples(d)
    assert ts[0].counselor == () and ts[1].counselor == ("q",)


def test_triples_join_multi_utterance_fields_with_sep():
    d = _dialogue(("counselor", ["a b", "c"]),
                  ("client", [("x", ("Fact",)), ("y", ("Fact",)), ("z", ("Fact",))]))
    ts = build_triples(d)
    assert ts[0].counselor == ("a", "b", SEP, "c")
    assert ts[2].context == ("x", SEP, "y")


def test_triples_use_nearest_counselor_turn():
    d = _dialogue(("counselor", ["first"]), ("client", ["x"]), ("counselor", ["second"]),
                  ("client", [("y", ("Chan",))]))
    (t,) = build_triples(d)
    assert t.counselor == ("second",)


def test_labeled_only_skips_unlabeled():
    d = _dialogue(("counselor", ["q"]), ("client", ["x", ("y", ("Fact",))]))
    assert len(build_triples(d)) == 1
    assert len(build_triples(d, labeled_only=False)) == 2


def _enumerate_client_utterances(d):
    return sum(len(t.utterances) for t in d.turns if t.role == "client")


def test_triple_count_hand_enumeration():
    d = _dialogue(("counselor", ["hello ?"]), ("client", ["a", "b ."]), ("counselor", ["ok"]),
                  ("client", ["c"]))
    assert len(build_triples(d, labeled_only=False)) == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_triple_count_equals_client_utterances(seed):
    for d in generate_synthetic_corpus(SyntheticConfig(n_dialogues=3, seed=seed, labeled_fraction=0.5)):
        assert len(build_triples(d, labeled_only=False)) == _enumerate_client_utterances(d)
        labeled = sum(u.labels is not None for u in d.client_utterances())
        assert len(build_triples(d)) == labeled


def test_conversation_pairs():
    d = _dialogue(("client", ["z"]), ("counselor", ["a", "b"]), ("client", ["x"]), ("counselor", ["c"]))
    assert conversation_pairs(d) == [(("a", SEP, "b"), ("x",))]


# -- splits -----------------------------------------------------------------------------------

def _triples_for(dialogues):
    return [t for d in dialogues for t in build_triples(d, labeled_only=False)]


def test_split_sizes_and_determinism():
    ds = generate_synthetic_corpus(SyntheticConfig(n_dialogues=100, seed=1))
    parts = split_dataset(_triples_for(ds), (0.7, 0.15, 0.15), seed=4)
    sizes = [len({t.dialogue_id for t in p}) for p in parts]
    for s, want in zip(sizes, (70, 15, 15)):
        assert abs(s - want) <= 1
    again = split_dataset(_triples_for(ds), (0.7, 0.15, 0.15), seed=4)
    assert [[t.id for t in p] for p in parts] == [[t.id for t in p] for p in again]


def test_split_disjoint_over_random_runs():
    ds = generate_synthetic_corpus(SyntheticConfig(n_dialogues=40, seed=2))
    triples = _triples_for(ds)
    for seed in range(50):
        parts = split_dataset(triples, (0.6, 0.2, 0.2), seed=seed)
        ids = [set(t.id for t in p) for p in parts]
        dids = [set(t.dialogue_id for t in p) for p in parts]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not ids[i] & ids[j]
                assert not dids[i] & dids[j]
        assert sum(len(s) for s in ids) == len(triples)


def test_split_errors():
    ds = generate_synthetic_corpus(SyntheticConfig(n_dialogues=2, seed=0))
    with pytest.raises(ValueError):
        split_dialogues(ds, (0.7, 0.15, 0.15))
    with pytest.raises(ValueError):
        split_dialogues(ds, (0.7, 0.7))


# -- synthetic corpus -------------------------------------------------------------------------

def test_generation_is_deterministic(tmp_path):
    cfg = SyntheticConfig(n_dialogues=20, seed=9)
    write_dialogues(tmp_path / "a", generate_synthetic_corpus(cfg))
    write_dialogues(tmp_path / "b", generate_synthetic_corpus(cfg))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_degenerate_mix_all_fact():
    ds = generate_synthetic_corpus(SyntheticConfig(n_dialogues=30, label_mix=(1, 0, 0, 0, 0), seed=0))
    labels = {u.labels for d in ds for u in d.client_utterances()}
    assert labels == {("Fact",)}


def test_default_mix_proportions():
    ds = generate_synthetic_corpus(SyntheticConfig(n_dialogues=1500, seed=5))
    counts = np.zeros(5)
    for d in ds:
        for u in d.client_utterances():
            for lab in u.labels:
                counts[LABELS.index(lab)] += 1
    assert counts.sum() >= 10_000
    # incidence: share of labeled utterances carrying each label
    n_utts = sum(len(d.client_utterances()) for d in ds)
    incidence = counts / n_utts
    share = counts / counts.sum()
    assert np.all(np.abs(share - np.asarray(DEFAULT_LABEL_MIX) / sum(DEFAULT_LABEL_MIX)) < 0.02)
    assert incidence.max() < 0.45


def test_multi_label_rate():
    ds = generate_synthetic_corpus(SyntheticConfig(n_dialogues=800, seed=6))
    utts = [u for d in ds for u in d.client_utterances()]
    rate = np.mean([len(u.labels) == 2 for u in utts])
    assert abs(rate - 0.10) < 0.02


def test_small_vocab_rejected():
    with pytest.raises(ValueError):
        SyntheticConfig(vocab_size=40)


def test_indicative_tokens_present():
    cfg = SyntheticConfig(n_dialogues=20, seed=0)
    lex = build_lexicon(cfg.vocab_size)
    for d in generate_synthetic_corpus(cfg):
        for u in d.client_utterances():
            toks = set(tokenize(u.text))
            for lab in u.labels:
                assert toks & set(lex.indicative[LABELS.index(lab)])


def test_planted_bigrams_appear_adjacent():
    cfg = SyntheticConfig(n_dialogues=40, seed=0, planted_bigrams=True, planted_rate=1.0)
    lex = build_lexicon(cfg.vocab_size)
    for d in generate_synthetic_corpus(cfg):
        for u in d.client_utterances():
            toks = tokenize(u.text)
            for lab in u.labels:
                a, b = lex.planted[LABELS.index(lab)]
                assert any(toks[i] == a and toks[i + 1] == b for i in range(len(toks) - 1))


# -- encoding ------------------------------------------------------------------------------------

def test_encode_examples():
    v = build_vocab([["a"]])
    enc = encode_sequences([("a",), ("zzz", "a"), ()], v, max_len=6)
    assert enc.ids[0].tolist() == [BOS_ID, 5, EOS_ID, PAD_ID]
    assert enc.ids[1, 1] == UNK_ID
    assert enc.ids[2].tolist()[:2] == [BOS_ID, EOS_ID]
    assert np.array_equal(enc.mask, enc.ids != PAD_ID)


def test_encode_truncates():
    v = build_vocab([list("abcdef")])
    enc = encode_sequences([tuple("abcdef")], v, max_len=4)
    assert enc.ids.shape == (1, 4)
    assert enc.ids[0, -1] == EOS_ID
    assert enc.lengths[0] == 6


def test_encode_mask_recount():
    rng = np.random.default_rng(0)
    v = build_vocab([list("abcdefgh")])
    seqs = [tuple(rng.choice(list("abcdefgh"), size=rng.integers(0, 20))) for _ in range(30)]
    enc = encode_sequences(seqs, v, max_len=64)
    for s, m in zip(seqs, enc.mask):
        assert m.sum() == len(s) + 2


def test_encode_batch_fields():
    t = Triple("t", "d", ("q",), (), ("x", "y"), (1, 0, 0, 0, 1))
    v = build_vocab([["q", "x", "y"]])
    b = encode_batch([t], v)
    assert b.triple_ids == ["t"]
    assert b.labels.tolist() == [[1, 0, 0, 0, 1]]
    assert b.context.mask.sum() == 2
    assert b.target.mask.sum() == 4
