import math

import numpy as np
import pytest

from schubert.data import (
    CLS,
    MASK,
    PAD,
    RESERVED,
    SEP,
    UNK,
    CorpusError,
    Vocab,
    batch_iterator,
    build_vocab,
    collate,
    generate_synthetic_corpus,
    make_examples,
    parse_corpus,
    unigram_entropy,
)


class TestVocab:
    def test_frequency_order(self):
        v = build_vocab("a a b", 7)
        assert v.itos == list(RESERVED) + ["a", "b"]
        assert v.stoi["a"] == 5 and v.stoi["b"] == 6

    def test_ties_lexicographic(self):
        assert build_vocab("c b a\nb c a", 8).itos[5:] == ["a", "b", "c"]

    def test_overflow_maps_to_unk(self):
        v = build_vocab("a a b c", 6)
        assert v.encode(["a", "b", "zz"]) == [5, UNK, UNK]

    def test_deterministic(self, tiny_corpus):
        assert build_vocab(tiny_corpus, 30) == build_vocab(tiny_corpus, 30)

    def test_empty_corpus(self):
        with pytest.raises(CorpusError):
            build_vocab("\n\n", 10)

    def test_round_trip_text(self, tiny_corpus, tiny_vocab):
        for doc in parse_corpus(tiny_corpus):
            for sent in doc:
                assert tiny_vocab.decode(tiny_vocab.encode(sent)) == sent

    def test_save_load(self, tmp_path, tiny_vocab):
        tiny_vocab.save(tmp_path / "vocab.txt")
        assert Vocab.load(tmp_path / "vocab.txt") == tiny_vocab

    def test_reserved_words_never_assigned(self):
        v = build_vocab("[MASK] x [CLS] x", 10)
        assert v.encode(["[MASK]"]) == [MASK] and v.itos[5:] == ["x"]


class TestSyntheticCorpus:
    def test_deterministic(self):
        assert generate_synthetic_corpus(1, 30) == generate_synthetic_corpus(1, 30)
        assert generate_synthetic_corpus(1, 30) != generate_synthetic_corpus(2, 30)

    def test_format(self):
        text = generate_synthetic_corpus(0, 40)
        docs = parse_corpus(text)
        assert sum(len(d) for d in docs) == 40
        assert len(docs) > 1 and "\n\n" in text

    def test_entropy_below_uniform(self):
        text = generate_synthetic_corpus(0, 2000, vocab_hint=300)
        n_words = len(set(text.split()))
        assert unigram_entropy(text) < math.log(n_words)

    def test_too_small(self):
        with pytest.raises(CorpusError):
            generate_synthetic_corpus(0, 1)


def test_parse_corpus_documents():
    docs = parse_corpus("a b\nc\n\n\nd e f\n")
    assert docs == [[["a", "b"], ["c"]], [["d", "e", "f"]]]


class TestExamples:
    def test_structure(self, tiny_corpus, tiny_vocab):
        for e in make_examples(tiny_corpus, tiny_vocab, seed=0, max_positions=16, n_examples=200):
            assert e.tokens[0] == CLS and e.tokens[-1] == SEP
            assert len(e.tokens) == len(e.segments) <= 16
            first_sep = e.segments.index(1) - 1
            assert e.tokens[first_sep] == SEP
            assert e.segments == sorted(e.segments)
            for p, orig in zip(e.masked_positions, e.masked_ids):
                assert orig not in (CLS, SEP, PAD)
                assert p not in (0, first_sep, len(e.tokens) - 1)

    def test_truncation_flagged(self):
        corpus = "a b c d e f g h i j\nk l m n o p q r s t\n"
        vocab = build_vocab(corpus, 40)
        ex = next(make_examples(corpus, vocab, seed=0, max_positions=8))
        assert ex.truncated and len(ex.tokens) == 8

    def test_zero_mask_rate(self, tiny_corpus, tiny_vocab):
        for e in make_examples(tiny_corpus, tiny_vocab, 0, mask_rate=0.0, max_positions=16, n_examples=50):
            assert e.masked_positions == []

    def test_bad_rates(self, tiny_corpus, tiny_vocab):
        with pytest.raises(CorpusError):
            next(make_examples(tiny_corpus, tiny_vocab, 0, mask_rate=1.5))
        with pytest.raises(CorpusError):
            next(make_examples(tiny_corpus, tiny_vocab, 0, replace_splits=(0.5, 0.1, 0.1)))

    def test_deterministic(self, tiny_corpus, tiny_vocab):
        a = list(make_examples(tiny_corpus, tiny_vocab, 5, max_positions=16, n_examples=30))
        b = list(make_examples(tiny_corpus, tiny_vocab, 5, max_positions=16, n_examples=30))
        assert a == b

    def test_masking_statistics(self):
        corpus = generate_synthetic_corpus(0, 500, vocab_hint=200)
        vocab = build_vocab(corpus, 256)
        eligible = selected = masked = kept = 0
        stream = make_examples(corpus, vocab, seed=1, max_positions=64)
        while eligible < 100_000:
            e = next(stream)
            # corruption never writes a special id, so this counts pre-masking words
            eligible += sum(t not in (CLS, SEP, PAD) for t in e.tokens)
            selected += len(e.masked_positions)
            for p, orig in zip(e.masked_positions, e.masked_ids):
                masked += e.tokens[p] == MASK
                kept += e.tokens[p] == orig
        assert abs(selected / eligible - 0.15) <= 0.01
        assert abs(masked / selected - 0.8) <= 0.02
        assert abs(kept / selected - 0.1) <= 0.02
        assert abs((selected - masked - kept) / selected - 0.1) <= 0.02

    def test_nsp_balance(self, tiny_corpus, tiny_vocab):
        labels = [e.is_next for e in make_examples(tiny_corpus, tiny_vocab, 2, max_positions=16, n_examples=10_000)]
        assert abs(np.mean(labels) - 0.5) <= 0.02

    def test_random_next_comes_from_another_document(self):
        corpus = "a a\na a\n\nb b\nb b\n"
        vocab = build_vocab(corpus, 10)
        for e in make_examples(corpus, vocab, 0, mask_rate=0.0, n_examples=50):
            first, second = e.tokens[1], e.tokens[4]
            assert (first == second) == bool(e.is_next)


class TestBatching:
    def test_identical_lengths_have_no_padding(self, tiny_corpus, tiny_vocab):
        examples = [e for e in make_examples(tiny_corpus, tiny_vocab, 0, max_positions=16, n_examples=200)]
        n = len(examples[0].tokens)
        same = [e for e in examples if len(e.tokens) == n][:4]
        b = collate(same)
        assert (b.tokens != PAD).all() and b.attention_mask.all()

    def test_padding_and_mask(self, tiny_corpus, tiny_vocab):
        examples = list(make_examples(tiny_corpus, tiny_vocab, 0, max_positions=16, n_examples=20))
        b = collate(examples)
        lengths = [len(e.tokens) for e in examples]
        assert b.tokens.shape == (20, max(lengths))
        np.testing.assert_array_equal(b.attention_mask.sum(1), lengths)
        assert (b.tokens[~b.attention_mask] == PAD).all()
        assert len(b.mlm_targets) == sum(len(e.masked_ids) for e in examples)
        assert b.attention_mask[b.mlm_rows, b.mlm_cols].all()

    def test_partition(self, tiny_corpus, tiny_vocab):
        examples = list(make_examples(tiny_corpus, tiny_vocab, 0, max_positions=16, n_examples=23))
        batches = list(batch_iterator(examples, 5, seed=0))
        assert len(batches) == math.ceil(23 / 5)
        seen = sorted(tuple(row[m].tolist()) for b in batches for row, m in zip(b.tokens, b.attention_mask))
        assert seen == sorted(tuple(e.tokens) for e in examples)

    def test_deterministic(self, tiny_corpus, tiny_vocab):
        examples = list(make_examples(tiny_corpus, tiny_vocab, 0, max_positions=16, n_examples=23))
        a = [b.tokens.tobytes() for b in batch_iterator(examples, 4, seed=3)]
        b = [b.tokens.tobytes() for b in batch_iterator(examples, 4, seed=3)]
        c = [b.tokens.tobytes() for b in batch_iterator(examples, 4, seed=4)]
        assert a == b and a != c

    def test_bad_batch_size(self):
        with pytest.raises(CorpusError):
            list(batch_iterator([], 0, 0))
