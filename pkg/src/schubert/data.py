"""Word-level corpus handling, synthetic text, MLM masking and NSP pairs.

Corpus files are UTF-8 text with one sentence per line and a blank line
between documents.  Every random draw comes from a ``numpy`` Generator
seeded by the caller.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


class CorpusError(ValueError):
    pass


def parse_corpus(text):
    """Split corpus text into documents -> sentences -> words."""
    docs, current = [], []
    for line in text.splitlines():
        words = line.split()
        if words:
            current.append(words)
        elif current:
            docs.append(current)
            current = []
    if current:
        docs.append(current)
    return docs


def format_corpus(docs):
    return "\n\n".join("\n".join(" ".join(s) for s in doc) for doc in docs) + "\n"


def read_corpus(path):
    return parse_corpus(Path(path).read_text(encoding="utf-8"))


class Vocab:
    """Dense token ids with the five special tokens at 0..4."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise CorpusError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, words):
        return [self.stoi.get(w, UNK) for w in words]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocab(corpus, max_size):
    """Most frequent words (ties broken lexicographically) after the specials.

    ``corpus`` may be raw text or parsed documents.
    """
    docs = parse_corpus(corpus) if isinstance(corpus, str) else corpus
    counts = Counter(w for doc in docs for sent in doc for w in sent)
    if not counts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    if max_size <= len(RESERVED):
        raise CorpusError(f"max_size must exceed the {len(RESERVED)} reserved tokens")
    words = sorted((w for w in counts if w not in RESERVED), key=lambda w: (-counts[w], w))
    return Vocab(list(RESERVED) + words[: max_size - len(RESERVED)])


# -- synthetic corpus ---------------------------------------------------------------
_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]


def _word_list(n):
    syll = [o + v for o in _ONSETS for v in _VOWELS]
    words = []
    for length in itertools.count(1):
        for combo in itertools.product(syll, repeat=length):
            words.append("".join(combo))
            if len(words) == n:
                return words


def generate_synthetic_corpus(seed, n_sentences, vocab_hint=200, n_topics=4):
    """Text from a seeded Markov chain so masked tokens are predictable.

    Each word has a handful of Zipf-weighted successors; every document is
    assigned a topic that restricts sentence starts and reweights the
    successors, so consecutive sentences share statistics.
    """
    if n_sentences < 2:
        raise CorpusError("need at least two sentences")
    rng = np.random.default_rng(seed)
    words = _word_list(vocab_hint)
    n = len(words)
    fan_out = min(4, n)
    succ = np.stack([rng.choice(n, size=fan_out, replace=False) for _ in range(n)])
    zipf = 1.0 / np.arange(1, fan_out + 1) ** 1.5
    topic_words = [rng.choice(n, size=max(2, n // n_topics), replace=False) for _ in range(n_topics)]
    docs, produced = [], 0
    while produced < n_sentences:
        topic = rng.integers(n_topics)
        boost = np.zeros(n)
        boost[topic_words[topic]] = 1.0
        n_doc = int(min(rng.integers(2, 7), n_sentences - produced))
        doc = []
        for _ in range(n_doc):
            w = int(rng.choice(topic_words[topic]))
            sent = [w]
            for _ in range(int(rng.integers(4, 11))):
                cand = succ[w]
                p = zipf * (1.0 + 2.0 * boost[cand])
                w = int(cand[rng.choice(fan_out, p=p / p.sum())])
                sent.append(w)
            doc.append([words[i] for i in sent])
        docs.append(doc)
        produced += n_doc
    return format_corpus(docs)


def unigram_entropy(text):
    counts = Counter(text.split())
    total = sum(counts.values())
    return -sum(c / total * math.log(c / total) for c in counts.values())


# -- examples -----------------------------------------------------------------------
@dataclass
class TrainingExample:
    tokens: list
    segments: list
    masked_positions: list
    masked_ids: list
    is_next: int
    truncated: bool = False


def _truncate_pair(a, b, max_tokens):
    a, b = list(a), list(b)
    truncated = False
    while len(a) + len(b) > max_tokens:
        truncated = True
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    return a, b, truncated


def mask_tokens(tokens, rng, vocab_size, mask_rate=0.15, replace_splits=(0.8, 0.1, 0.1)):
    """BERT-style corruption; returns ``(corrupted, positions, original_ids)``."""
    tokens = list(tokens)
    positions, originals = [], []
    p_mask, p_random, _ = replace_splits
    for i, t in enumerate(tokens):
        if t in (CLS, SEP, PAD) or rng.random() >= mask_rate:
            continue
        positions.append(i)
        originals.append(t)
        r = rng.random()
        if r < p_mask:
            tokens[i] = MASK
        elif r < p_mask + p_random:
            tokens[i] = int(rng.integers(len(RESERVED), vocab_size))
    return tokens, positions, originals


def make_examples(
    corpus,
    vocab,
    seed,
    mask_rate=0.15,
    replace_splits=(0.8, 0.1, 0.1),
    max_positions=64,
    n_examples=None,
):
    """Yield NSP sentence pairs with MLM masking; infinite when ``n_examples`` is None."""
    if not 0.0 <= mask_rate <= 1.0:
        raise CorpusError(f"mask_rate must lie in [0, 1] (got {mask_rate})")
    if any(s < 0 for s in replace_splits) or abs(sum(replace_splits) - 1.0) > 1e-9:
        raise CorpusError(f"replace_splits must be non-negative and sum to 1 (got {replace_splits})")
    if max_positions < 5:
        raise CorpusError("max_positions must leave room for [CLS] a [SEP] b [SEP]")
    docs = parse_corpus(corpus) if isinstance(corpus, str) else corpus
    pairs = [(d, i) for d, doc in enumerate(docs) for i in range(len(doc) - 1)]
    sentences = [(d, i) for d, doc in enumerate(docs) for i in range(len(doc))]
    if not pairs:
        raise CorpusError("corpus needs at least one document with two sentences")
    rng = np.random.default_rng(seed)
    produced = 0
    while n_examples is None or produced < n_examples:
        d, i = pairs[rng.integers(len(pairs))]
        first = docs[d][i]
        is_next = int(rng.random() < 0.5)
        if is_next or len(docs) == 1:
            second, is_next = docs[d][i + 1], 1
        else:
            while True:
                d2, j = sentences[rng.integers(len(sentences))]
                if d2 != d:
                    break
            second = docs[d2][j]
        a, b, truncated = _truncate_pair(vocab.encode(first), vocab.encode(second), max_positions - 3)
        tokens = [CLS] + a + [SEP] + b + [SEP]
        segments = [0] * (len(a) + 2) + [1] * (len(b) + 1)
        tokens, positions, originals = mask_tokens(tokens, rng, len(vocab), mask_rate, replace_splits)
        yield TrainingExample(tokens, segments, positions, originals, is_next, truncated)
        produced += 1


@dataclass
class Batch:
    """Padded examples plus flattened masked-LM targets."""

    tokens: np.ndarray
    segments: np.ndarray
    attention_mask: np.ndarray
    mlm_rows: np.ndarray
    mlm_cols: np.ndarray
    mlm_targets: np.ndarray
    is_next: np.ndarray

    def __len__(self):
        return len(self.tokens)


def collate(examples):
    width = max(len(e.tokens) for e in examples)
    B = len(examples)
    tokens = np.full((B, width), PAD, dtype=np.int64)
    segments = np.zeros((B, width), dtype=np.int64)
    mask = np.zeros((B, width), dtype=bool)
    rows, cols, targets = [], [], []
    for b, e in enumerate(examples):
        n = len(e.tokens)
        tokens[b, :n] = e.tokens
        segments[b, :n] = e.segments
        mask[b, :n] = True
        rows += [b] * len(e.masked_positions)
        cols += list(e.masked_positions)
        targets += list(e.masked_ids)
    return Batch(
        tokens,
        segments,
        mask,
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(targets, dtype=np.int64),
        np.asarray([e.is_next for e in examples], dtype=np.int64),
    )


def batch_iterator(examples, batch_size, seed):
    """One shuffled pass over ``examples`` in padded batches."""
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    examples = list(examples)
    order = np.random.default_rng(seed).permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield collate([examples[i] for i in order[start : start + batch_size]])


def infinite_batches(examples, batch_size, seed):
    """Endless reshuffled epochs; epoch ``e`` uses seed ``(seed, e)``."""
    for epoch in itertools.count():
        yield from batch_iterator(examples, batch_size, [seed, epoch])
