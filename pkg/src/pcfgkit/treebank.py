"""Bracketed-treebank and plaintext corpus ingestion.

Reads PTB-style s-expressions (one per line or multi-line), strips function
tags and coindices from labels, removes empty elements, and exposes tokens
plus labeled spans for evaluation and overlap analysis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import DataError
from .grammar import DEFAULT_SPAN_POLICY, Sentence, SpanPolicy, spans_from_raw
from .lexicon import Vocabulary

log = logging.getLogger(__name__)

NONE_LABEL = "-NONE-"


@dataclass
class LabeledNode:
    label: str
    children: list = field(default_factory=list)
    word: str = None

    @property
    def is_leaf(self):
        return self.word is not None

    @property
    def is_preterminal(self):
        return len(self.children) == 1 and self.children[0].is_leaf

    def leaves(self):
        if self.is_leaf:
            return [self.word]
        out = []
        for child in self.children:
            out.extend(child.leaves())
        return out

    def to_bracket(self) -> str:
        if self.is_leaf:
            return self.word
        inner = " ".join(c.to_bracket() for c in self.children)
        return f"({self.label} {inner})"


@dataclass
class TreebankEntry:
    sent_id: str
    raw_tokens: list
    tree: LabeledNode
    labeled_spans: list  # (i, j, label) of non-preterminal internal nodes, all widths

    def __len__(self):
        return len(self.raw_tokens)

    def gold_spans(self, policy: SpanPolicy = DEFAULT_SPAN_POLICY):
        n = len(self.raw_tokens)
        labels = {}
        for i, j, lab in self.labeled_spans:
            labels.setdefault((i, j), lab)  # outermost label wins on unary chains
        return spans_from_raw([(i, j) for i, j, _ in self.labeled_spans], n, policy, labels)


@dataclass
class Treebank:
    entries: list
    path: str = None
    skipped: int = 0

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def normalize_label(label: str) -> str:
    """Cut function tags / coindices after '-' or '='; keep -NONE-/-LRB- style
    labels (leading '-') intact."""
    if label.startswith("-"):
        return label
    for sep in ("-", "="):
        pos = label.find(sep)
        if pos > 0:
            label = label[:pos]
    return label


def _tokenize_sexpr(text: str):
    out = []
    cur = []
    for ch in text:
        if ch in "()":
            if cur:
                out.append("".join(cur))
                cur = []
            out.append(ch)
        elif ch.isspace():
            if cur:
                out.append("".join(cur))
                cur = []
        else:
            cur.append(ch)
    if cur:
        out.append("".join(cur))
    return out


def _parse_trees(tokens, where: str):
    pos = 0

    def parse_node():
        nonlocal pos
        assert tokens[pos] == "("
        pos += 1
        if pos >= len(tokens):
            raise DataError(f"{where}: unbalanced parentheses at token {pos}")
        label = ""
        if tokens[pos] not in "()":
            label = tokens[pos]
            pos += 1
        node = LabeledNode(label)
        while pos < len(tokens) and tokens[pos] != ")":
            if tokens[pos] == "(":
                node.children.append(parse_node())
            else:
                node.children.append(LabeledNode("", word=tokens[pos]))
                pos += 1
        if pos >= len(tokens):
            raise DataError(f"{where}: unbalanced parentheses (missing ')')")
        pos += 1
        return node

    trees = []
    while pos < len(tokens):
        if tokens[pos] != "(":
            raise DataError(f"{where}: unexpected token {tokens[pos]!r} at top level")
        trees.append(parse_node())
    return trees


def _clean(node: LabeledNode):
    """Normalize labels, drop empty elements; None when nothing remains."""
    if node.is_leaf:
        return node
    node.label = normalize_label(node.label)
    if node.label == NONE_LABEL:
        return None
    kept = []
    for child in node.children:
        cleaned = _clean(child)
        if cleaned is not None:
            kept.append(cleaned)
    node.children = kept
    if not kept:
        return None
    return node


def _unwrap(node: LabeledNode) -> LabeledNode:
    # PTB files often wrap each tree as "( (S ...) )"
    while node.label == "" and len(node.children) == 1 and not node.children[0].is_leaf:
        node = node.children[0]
    return node


def _collect(node: LabeledNode, start: int, tokens: list, spans: list) -> int:
    if node.is_leaf:
        tokens.append(node.word)
        return start + 1
    end = start
    for child in node.children:
        end = _collect(child, end, tokens, spans)
    if not node.is_preterminal and not node.is_leaf:
        spans.append((start, end, node.label))
    return end


def read_treebank(path) -> Treebank:
    """Parse a bracketed treebank file into entries with tokens and spans."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise DataError(f"{path}: empty treebank file")
    depth = 0
    for ch in text:
        depth += ch == "("
        depth -= ch == ")"
        if depth < 0:
            raise DataError(f"{path}: unbalanced parentheses (extra ')')")
    if depth != 0:
        raise DataError(f"{path}: unbalanced parentheses ({depth} unclosed)")

    entries = []
    skipped = 0
    for index, raw in enumerate(_parse_trees(_tokenize_sexpr(text), str(path))):
        tree = _clean(_unwrap(raw))
        if tree is None or tree.is_leaf:
            skipped += 1
            continue
        tree = _unwrap(tree)
        tokens, spans = [], []
        _collect(tree, 0, tokens, spans)
        if not tokens:
            skipped += 1
            continue
        entries.append(TreebankEntry(str(index), tokens, tree, spans))
    if not entries:
        raise DataError(f"{path}: no usable trees")
    if skipped:
        log.warning("%s: skipped %d empty/trace-only trees", path, skipped)
    return Treebank(entries, path=str(path), skipped=skipped)


def write_treebank(path, trees):
    """One bracketed tree per line; inverse of read_treebank for clean trees."""
    with open(path, "w", encoding="utf-8") as fh:
        for tree in trees:
            fh.write(tree.to_bracket() + "\n")


# ---------------------------------------------------------------------------
# Plaintext corpora

def read_token_lines(path):
    """Whitespace-tokenized lines; returns (list of token lists, ids, skipped)."""
    sents, ids = [], []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for index, line in enumerate(fh):
            line = line.rstrip("\r\n")
            if "\t" in line:
                sent_id, body = line.split("\t", 1)
            else:
                sent_id, body = f"s{index:06d}", line
            tokens = body.split()
            if not tokens:
                skipped += 1
                continue
            sents.append(tokens)
            ids.append(sent_id)
    if skipped:
        log.warning("%s: skipped %d empty lines", path, skipped)
    return sents, ids, skipped


def read_plaintext(path, vocab: Vocabulary):
    """One Sentence per non-empty line; out-of-vocabulary tokens map to unk."""
    sents, ids, _skipped = read_token_lines(path)
    return [
        Sentence(vocab.encode(tokens), raw_tokens=tokens, sent_id=sent_id)
        for tokens, sent_id in zip(sents, ids)
    ]


def filter_by_length(items, max_tokens_exclusive: float):
    """Keep items whose token count is strictly below the threshold."""
    kept = [item for item in items if len(item) < max_tokens_exclusive]
    if not kept:
        log.warning("length filter %.2f removed every item", max_tokens_exclusive)
    return kept
