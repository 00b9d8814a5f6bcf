"""Vocabulary construction, turn encoding, and MLM masking contracts."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nap.errors import ConfigError, UnknownActionError
from nap.tokenizer import (
    HISTORY_CAP,
    IGNORE_LABEL,
    MAX_LEN,
    Vocab,
    build_vocab,
    encode_batch,
    encode_turn,
    load_vocab,
    mask_for_mlm,
    normalize_words,
    save_vocab,
)
from oracles import vocab_by_frequency

ACTIONS = ["greet", "verify_dob", "goodbye"]


@pytest.fixture
def vocab():
    corpus = ["yes I said yes", "no thanks", "my date of birth is may first",
              "yes the policy number", "hold on a moment"]
    return build_vocab(corpus, min_freq=1, action_names=ACTIONS)


def test_specials_come_first_with_pad_zero(vocab):
    assert vocab.token_to_id["[PAD]"] == 0
    assert vocab.token_to_id["[UNK]"] == 1
    assert vocab.token_to_id["[CLS]"] == 2
    assert vocab.token_to_id["[SEP]"] == 3
    assert vocab.token_to_id["[MASK]"] == 4
    for k, a in enumerate(ACTIONS):
        assert vocab.token_to_id["ACT:" + a] == 5 + k
    assert vocab.n_special == 5 + len(ACTIONS)


def test_ids_are_dense(vocab):
    assert sorted(vocab.token_to_id.values()) == list(range(len(vocab)))


def test_frequency_then_lexicographic_order():
    v = build_vocab(["a b", "a"], min_freq=1, action_names=[])
    assert v.token_to_id["a"] < v.token_to_id["b"]
    # tie on frequency -> alphabetical
    v2 = build_vocab(["zebra apple"], min_freq=1, action_names=[])
    assert v2.token_to_id["apple"] < v2.token_to_id["zebra"]


def test_min_freq_filters_to_unk():
    v = build_vocab(["a b", "a"], min_freq=2, action_names=[])
    assert "b" not in v.token_to_id
    assert v.encode_words("b") == [v.unk_id]


def test_vocab_matches_independent_word_count(rng):
    words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"]
    corpus = [" ".join(rng.choice(words, size=rng.integers(1, 8))) for _ in range(1000)]
    v = build_vocab(corpus, min_freq=1, action_names=[])
    expected = vocab_by_frequency(corpus)
    assert list(v.id_to_token[v.n_special:]) == expected
    assert len(v) == v.n_special + len(expected)


def test_empty_corpus_rejected():
    with pytest.raises(ConfigError):
        build_vocab([], min_freq=1, action_names=ACTIONS)


def test_normalization_strips_punctuation_and_case():
    assert normalize_words("Yes, it's May 1st!") == ["yes", "it's", "may", "1st"]


def test_encode_decode_round_trip(vocab):
    text = "yes the policy number"
    ids, _ = encode_turn(text, ["greet", "verify_dob"], vocab)
    tokens = vocab.decode(ids)
    assert tokens == ["yes", "the", "policy", "number", "ACT:greet", "ACT:verify_dob"]


def test_empty_turn_layout(vocab):
    ids, mask = encode_turn("", [], vocab)
    assert ids.shape == (MAX_LEN,)
    assert list(ids[:3]) == [vocab.cls_id, vocab.sep_id, vocab.sep_id]
    assert mask.sum() == 3
    assert set(ids[3:]) == {vocab.pad_id}
    assert set(mask[3:]) == {0}


def test_truncation_drops_utterance_before_actions(vocab):
    long_utt = " ".join(["yes"] * 200)
    history = ["greet", "verify_dob"] * 5  # exactly 10 actions
    ids, mask = encode_turn(long_utt, history, vocab)
    assert ids.shape == (MAX_LEN,)
    assert mask.sum() == MAX_LEN  # completely full
    act_ids = [i for i in ids if vocab.n_special > i >= 5]
    assert len(act_ids) == 10  # all ten action tokens survive
    n_words = MAX_LEN - 3 - 10
    assert list(ids[1:1 + n_words]) == [vocab.token_to_id["yes"]] * n_words


def test_truncation_drops_oldest_words(vocab):
    words = "no thanks " + " ".join(["yes"] * 130)
    ids, _ = encode_turn(words, [], vocab)
    kept = vocab.decode(ids)
    assert "no" not in kept and "thanks" not in kept  # oldest words dropped
    assert kept == ["yes"] * (MAX_LEN - 3)


def test_history_cap_keeps_most_recent(vocab):
    history = ["greet"] * 20 + ["goodbye"]
    ids, _ = encode_turn("yes", history, vocab)
    acts = [t for t in vocab.decode(ids) if t.startswith("ACT:")]
    assert len(acts) == HISTORY_CAP
    assert acts[-1] == "ACT:goodbye"
    assert set(acts[:-1]) == {"ACT:greet"}


def test_unknown_action_raises(vocab):
    with pytest.raises(UnknownActionError):
        encode_turn("yes", ["no_such_action"], vocab)


def test_encode_batch_stacks(vocab):
    ids, mask = encode_batch([("yes", ["greet"]), ("no thanks", [])], vocab)
    assert ids.shape == (2, MAX_LEN)
    one_ids, one_mask = encode_turn("yes", ["greet"], vocab)
    assert np.array_equal(ids[0], one_ids)
    assert np.array_equal(mask[0], one_mask)


@given(st.text(alphabet="abcxyz ,.!?'", min_size=0, max_size=300),
       st.integers(min_value=0, max_value=25))
def test_encoded_length_never_exceeds_max(vocab_text, n_actions):
    v = build_vocab(["a b c x y z"], min_freq=1, action_names=ACTIONS)
    history = (["greet", "verify_dob", "goodbye"] * 9)[:n_actions]
    ids, mask = encode_turn(vocab_text, history, v)
    assert ids.shape == (MAX_LEN,)
    assert mask.shape == (MAX_LEN,)
    assert ((ids == v.pad_id) == (mask == 0)).all()


# -- MLM masking -----------------------------------------------------------------


def _mlm_fixture(vocab, rows=64, seed=7):
    rng = np.random.default_rng(seed)
    word_ids = np.arange(vocab.n_special, len(vocab))
    turns = []
    for _ in range(rows):
        n = rng.integers(40, 100)
        text = " ".join(vocab.id_to_token[i] for i in rng.choice(word_ids, size=n))
        turns.append((text, ["greet"]))
    ids, _ = encode_batch(turns, vocab)
    return ids


def test_mlm_labels_exactly_at_selected_positions(vocab):
    ids = _mlm_fixture(vocab)
    batch = mask_for_mlm(ids, vocab, 0.15, rng_seed=3)
    changed = batch.input_ids != batch.original_ids
    labeled = batch.mlm_labels != IGNORE_LABEL
    # every changed position is labeled; labeled-but-unchanged = the 10% identity picks
    assert (~changed | labeled).all()
    assert (batch.mlm_labels[labeled] == batch.original_ids[labeled]).all()
    assert np.array_equal(batch.original_ids, ids)


def test_mlm_never_touches_specials_or_pad(vocab):
    ids = _mlm_fixture(vocab)
    batch = mask_for_mlm(ids, vocab, 0.15, rng_seed=11)
    special = ids < vocab.n_special
    assert (batch.mlm_labels[special] == IGNORE_LABEL).all()
    assert np.array_equal(batch.input_ids[special], ids[special])
    assert (batch.attention_mask == (ids != vocab.pad_id)).all()


def test_mlm_deterministic_per_seed(vocab):
    ids = _mlm_fixture(vocab)
    a = mask_for_mlm(ids, vocab, 0.15, rng_seed=5)
    b = mask_for_mlm(ids, vocab, 0.15, rng_seed=5)
    assert np.array_equal(a.input_ids, b.input_ids)
    assert np.array_equal(a.mlm_labels, b.mlm_labels)
    c = mask_for_mlm(ids, vocab, 0.15, rng_seed=6)
    assert not np.array_equal(a.input_ids, c.input_ids)


def test_mlm_masked_fraction_in_band(vocab):
    ids = _mlm_fixture(vocab, rows=128, seed=2)
    batch = mask_for_mlm(ids, vocab, 0.15, rng_seed=1)
    for row in range(ids.shape[0]):
        candidates = int((ids[row] >= vocab.n_special).sum())
        if candidates < 32:
            continue
        picked = int((batch.mlm_labels[row] != IGNORE_LABEL).sum())
        assert 0.10 <= picked / candidates <= 0.20


def test_mlm_corruption_split_is_roughly_80_10_10(vocab):
    ids = _mlm_fixture(vocab, rows=256, seed=9)
    batch = mask_for_mlm(ids, vocab, 0.15, rng_seed=13)
    picked = batch.mlm_labels != IGNORE_LABEL
    n = int(picked.sum())
    masked = int((batch.input_ids[picked] == vocab.mask_id).sum())
    unchanged = int((batch.input_ids[picked] == batch.original_ids[picked]).sum())
    random_repl = n - masked - unchanged
    assert 0.74 < masked / n < 0.86
    assert 0.05 < unchanged / n < 0.15
    assert 0.05 < random_repl / n < 0.15


def test_mlm_empirical_fraction_near_15_percent(vocab):
    ids = _mlm_fixture(vocab, rows=256, seed=4)
    batch = mask_for_mlm(ids, vocab, 0.15, rng_seed=21)
    candidates = int((ids >= vocab.n_special).sum())
    picked = int((batch.mlm_labels != IGNORE_LABEL).sum())
    assert abs(picked / candidates - 0.15) < 0.01


def test_mlm_zero_candidates_all_sentinel(vocab):
    ids, _ = encode_turn("", ["greet"], vocab)
    batch = mask_for_mlm(ids, vocab, 0.15, rng_seed=1)
    assert (batch.mlm_labels == IGNORE_LABEL).all()
    assert np.array_equal(batch.input_ids, ids)


def test_mlm_rejects_bad_prob(vocab):
    ids = _mlm_fixture(vocab, rows=2)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ConfigError):
            mask_for_mlm(ids, vocab, bad, rng_seed=0)


# -- vocab file round trip ----------------------------------------------------------


def test_vocab_file_round_trip(tmp_path, vocab):
    path = tmp_path / "vocab.tsv"
    save_vocab(path, vocab)
    loaded = load_vocab(path)
    assert loaded.id_to_token == vocab.id_to_token
    assert loaded.action_names == vocab.action_names
    first = path.read_text().splitlines()[0]
    assert first == "[PAD]\t0"


def test_vocab_file_stable_across_runs(tmp_path):
    corpus = ["b a", "a c", "c c"]
    p1, p2 = tmp_path / "v1.tsv", tmp_path / "v2.tsv"
    save_vocab(p1, build_vocab(corpus, 1, ACTIONS))
    save_vocab(p2, build_vocab(list(corpus), 1, ACTIONS))
    assert p1.read_bytes() == p2.read_bytes()


def test_vocab_file_rejects_garbage(tmp_path):
    bad = tmp_path / "vocab.tsv"
    bad.write_text("[PAD]\t0\nname only line\n")
    with pytest.raises(ConfigError):
        load_vocab(bad)
    bad.write_text("[PAD]\t0\n[UNK]\t5\n")
    with pytest.raises(ConfigError):
        load_vocab(bad)
    bad.write_text("oops\t0\n")
    with pytest.raises(ConfigError):
        load_vocab(bad)
