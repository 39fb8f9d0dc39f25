"""Vocabulary construction, pre-trained embedding files, and the four
test-time embedding-selection strategies (Direct / Random / Unknown /
Standard) with their unknown-word statistics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, StructuralError

UNK = "<unk>"


class Vocabulary:
    """Dense word<->index mapping with a dedicated trailing `<unk>` slot."""

    def __init__(self, words, counts=None):
        if UNK in words:
            raise StructuralError(f"{UNK!r} may not appear among ranked words")
        self.itos = list(words) + [UNK]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise StructuralError("duplicate words in vocabulary")
        self.counts = dict(counts) if counts else {}

    @property
    def unk_index(self) -> int:
        return len(self.itos) - 1

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi and word != UNK

    def index(self, word) -> int:
        return self.stoi.get(word, self.unk_index)

    def encode(self, tokens):
        return [self.index(t) for t in tokens]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, w in enumerate(self.itos):
                fh.write(f"{w}\t{i}\t{self.counts.get(w, 0)}\n")

    @classmethod
    def load(cls, path):
        words, counts = [], {}
        saw_unk = False
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected word<TAB>index<TAB>count")
                word, idx, cnt = parts
                if int(idx) != lineno - 1:
                    raise DataError(f"{path}:{lineno}: indices must be dense and ordered")
                if word == UNK:
                    saw_unk = True
                elif saw_unk:
                    raise DataError(f"{path}:{lineno}: {UNK!r} must be the last entry")
                else:
                    words.append(word)
                    counts[word] = int(cnt)
        if not saw_unk:
            raise DataError(f"{path}: missing {UNK!r} entry")
        return cls(words, counts)


def build_vocabulary(corpus, size_cap: int, lowercase: bool = False) -> Vocabulary:
    """Rank words by frequency (ties lexicographic), keep the top `size_cap`.

    `corpus` is an iterable of token sequences. A literal `<unk>` token in the
    corpus is ignored during ranking; it always gets the dedicated slot.
    """
    counter = Counter()
    for tokens in corpus:
        for tok in tokens:
            if lowercase:
                tok = tok.lower()
            if tok != UNK:
                counter[tok] += 1
    if not counter:
        raise DataError("empty corpus: no tokens to build a vocabulary from")
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:size_cap]
    return Vocabulary([w for w, _ in ranked], dict(ranked))


def load_embeddings(path, expected_dim: int = None) -> dict:
    """Parse whitespace-separated `word v1 ... vd` lines (no header)."""
    table = {}
    dim = expected_dim
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\r\n").split()
            if not parts:
                continue
            word, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
                if dim == 0:
                    raise DataError(f"{path}:{lineno}: no vector values")
            if len(values) != dim:
                raise DataError(
                    f"{path}:{lineno}: expected {dim} values, found {len(values)}"
                )
            try:
                vec = np.array([float(v) for v in values], dtype=float)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric field ({exc})")
            table[word] = vec
    if not table:
        raise DataError(f"{path}: no embeddings found")
    return table


def write_embeddings(path, table: dict, digits: int = 6):
    with open(path, "w", encoding="utf-8") as fh:
        for word, vec in table.items():
            body = " ".join(f"{float(x):.{digits}g}" for x in np.asarray(vec).ravel())
            fh.write(f"{word} {body}\n")


@dataclass
class EmbeddingTable:
    matrix: np.ndarray  # [len(vocab), d]
    source_tags: list  # per row: pretrained | learned | random | unk-shared

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.shape[0] != len(self.source_tags):
            raise StructuralError("one source tag per embedding row required")
        if not np.isfinite(self.matrix).all():
            raise StructuralError("non-finite embedding entries")

    @property
    def dim(self):
        return self.matrix.shape[1]


@dataclass
class SelectionReport:
    strategy: str
    assignments: dict  # word -> branch tag
    tag_counts: dict
    unknown_type_rate: float = None
    unknown_token_rate: float = None
    random_words: list = field(default_factory=list)


STRATEGIES = ("Direct", "Random", "Unknown", "Standard")


def _random_row(rng, dim):
    return rng.uniform(-0.1, 0.1, size=dim)


def select_embeddings(strategy: str, train_vocab: Vocabulary, target_vocab: Vocabulary,
                      pretrained: dict, learned: EmbeddingTable, rng_seed: int,
                      test_corpus=None):
    """Assemble the test-time vocabulary and embedding table.

    Decision table per target word w (Direct instead keeps the training-time
    vocabulary and table unchanged):
      Random:   w in pretrained -> pretrained row; else seeded random row.
      Unknown:  w in pretrained -> pretrained row; else the `<unk>` row.
      Standard: w in pretrained -> pretrained row; elif w in train vocab ->
                its learned row; else seeded random row.
    Words outside the active vocabulary always map to `<unk>`. The report
    counts each branch and, when `test_corpus` is given, the type- and
    token-level unknown proportions over it.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown selection strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy in ("Direct", "Standard") and learned is None:
        raise ConfigError(f"strategy {strategy} needs the learned embedding table")
    if learned is not None and learned.matrix.shape[0] != len(train_vocab):
        raise StructuralError("learned table must be indexed by the training vocabulary")

    dim = learned.dim if learned is not None else len(next(iter(pretrained.values())))
    rng = np.random.default_rng(rng_seed)

    def unk_row():
        if pretrained and UNK in pretrained:
            return np.asarray(pretrained[UNK], dtype=float), "unk-shared"
        if learned is not None:
            return learned.matrix[train_vocab.unk_index].copy(), "learned"
        return _random_row(rng, dim), "random"

    if strategy == "Direct":
        active = train_vocab
        if learned is None:
            raise ConfigError("Direct strategy needs the learned embedding table")
        matrix = learned.matrix.copy()
        tags = list(learned.source_tags)
        assignments = {w: tags[active.stoi[w]] for w in active.itos[:-1]}
        unknown_words = None  # unknown = not in the training vocabulary
        random_words = []
    else:
        active = target_vocab
        rows, tags, assignments = [], [], {}
        random_words = []
        unk_vec, unk_tag = unk_row()
        for w in active.itos[:-1]:
            if pretrained and w in pretrained:
                rows.append(np.asarray(pretrained[w], dtype=float))
                tags.append("pretrained")
            elif strategy == "Standard" and w in train_vocab:
                rows.append(learned.matrix[train_vocab.stoi[w]].copy())
                tags.append("learned")
            elif strategy == "Unknown":
                rows.append(unk_vec.copy())
                tags.append("unk-shared")
            else:  # Random, or Standard fallthrough
                rows.append(_random_row(rng, dim))
                tags.append("random")
                random_words.append(w)
            assignments[w] = tags[-1]
        rows.append(unk_vec)
        tags.append("unk-shared" if unk_tag == "unk-shared" else unk_tag)
        matrix = np.stack(rows)
        unknown_words = {w for w, t in assignments.items() if t == "unk-shared"}

    table = EmbeddingTable(matrix, tags)
    report = SelectionReport(
        strategy=strategy,
        assignments=assignments,
        tag_counts=dict(Counter(table.source_tags)),
        random_words=random_words,
    )
    if test_corpus is not None:
        report.unknown_type_rate, report.unknown_token_rate = _unknown_rates(
            test_corpus, active, unknown_words
        )
    return active, table, report


def _unknown_rates(corpus, vocab: Vocabulary, extra_unknown=None):
    """A token counts as unknown when it falls outside the vocabulary or is
    explicitly mapped onto the `<unk>` embedding."""
    types = set()
    unk_types = set()
    tokens = 0
    unk_tokens = 0
    for sent in corpus:
        for tok in sent:
            tokens += 1
            types.add(tok)
            if tok not in vocab or (extra_unknown and tok in extra_unknown):
                unk_tokens += 1
                unk_types.add(tok)
    if tokens == 0:
        raise DataError("empty test corpus")
    return len(unk_types) / len(types), unk_tokens / tokens


def unknown_stats(corpus, vocab: Vocabulary):
    """(type rate, token rate) of out-of-vocabulary words in a corpus."""
    return _unknown_rates(corpus, vocab)
