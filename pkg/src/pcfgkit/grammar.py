"""Grammar representation: rule tables, binary parse trees, spans, sampling.

The grammar family has three rule schemata: a start rule expanding to a
single nonterminal, binary rules whose children range over nonterminals
and preterminals, and preterminal rules emitting one word. Symbols are
dense 0-based indices; in joint child indexing, nonterminals occupy
[0, num_nt) and preterminals [num_nt, num_nt + num_pt). All probability
math is in natural-log space, with -inf encoding a forbidden rule.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field

import torch

from .errors import DegenerateInputError, StructuralError, ValidationError

NEG_INF = float("-inf")

_DTYPE = torch.float64


@dataclass(frozen=True)
class GrammarShape:
    """Symbol alphabet sizes of one grammar instance."""

    num_nonterminals: int
    num_preterminals: int
    vocab_size: int

    def __post_init__(self):
        for name in ("num_nonterminals", "num_preterminals", "vocab_size"):
            if getattr(self, name) < 1:
                raise StructuralError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def num_symbols(self) -> int:
        """Size of the joint child alphabet (nonterminals then preterminals)."""
        return self.num_nonterminals + self.num_preterminals


@dataclass(frozen=True)
class SpanPolicy:
    """Which trivial spans survive into a SpanSet."""

    include_whole_sentence: bool = False
    include_width_one: bool = False


DEFAULT_SPAN_POLICY = SpanPolicy()
KEEP_ALL_POLICY = SpanPolicy(include_whole_sentence=True, include_width_one=True)


class SpanSet:
    """An unlabeled (optionally labeled) set of constituent spans.

    Set semantics: duplicate spans collapse. `n` is the sentence length the
    spans live in; it is optional but enables bounds checking downstream.
    """

    __slots__ = ("spans", "labels", "n")

    def __init__(self, spans, labels=None, n=None):
        self.spans = frozenset((int(i), int(j)) for i, j in spans)
        self.labels = dict(labels) if labels else None
        self.n = n
        for i, j in self.spans:
            if i < 0 or j <= i:
                raise StructuralError(f"bad span ({i}, {j})")
            if n is not None and j > n:
                raise StructuralError(f"span ({i}, {j}) exceeds sentence length {n}")

    def __len__(self):
        return len(self.spans)

    def __iter__(self):
        return iter(sorted(self.spans))

    def __contains__(self, span):
        return tuple(span) in self.spans

    def __eq__(self, other):
        return isinstance(other, SpanSet) and self.spans == other.spans

    def __hash__(self):
        return hash(self.spans)

    def __repr__(self):
        return f"SpanSet({sorted(self.spans)})"


@dataclass
class Sentence:
    """Word-index sequence plus the original surface strings."""

    tokens: list
    raw_tokens: list = field(default=None)
    sent_id: str = None

    def __post_init__(self):
        if not self.tokens:
            raise StructuralError("Sentence must be non-empty")
        self.tokens = [int(t) for t in self.tokens]
        if self.raw_tokens is None:
            self.raw_tokens = [f"w{t}" for t in self.tokens]
        if len(self.raw_tokens) != len(self.tokens):
            raise StructuralError("raw_tokens length differs from tokens")

    def __len__(self):
        return len(self.tokens)


class RuleTable:
    """Dense log-potential tensors for start, binary, and preterminal rules.

    start_logp:   [num_nt]                log p(start -> A)
    binary_logp:  [num_nt, S, S]          log p(A -> B C), S = num_nt + num_pt
    preterm_logp: [num_pt, vocab_size]    log p(T -> w)

    In normalized mode each distribution log-sums to zero; in potential mode
    entries are unconstrained finite reals (plus -inf for forbidden rules).
    """

    __slots__ = ("start_logp", "binary_logp", "preterm_logp", "shape")

    def __init__(self, start_logp, binary_logp, preterm_logp):
        self.start_logp = torch.as_tensor(start_logp, dtype=_DTYPE)
        self.binary_logp = torch.as_tensor(binary_logp, dtype=_DTYPE)
        self.preterm_logp = torch.as_tensor(preterm_logp, dtype=_DTYPE)
        if self.start_logp.dim() != 1 or self.binary_logp.dim() != 3 or self.preterm_logp.dim() != 2:
            raise StructuralError("rule tensors must have dims 1/3/2")
        nt = self.start_logp.shape[0]
        pt, vocab = self.preterm_logp.shape
        s = nt + pt
        if self.binary_logp.shape != (nt, s, s):
            raise StructuralError(
                f"binary table shape {tuple(self.binary_logp.shape)} != ({nt}, {s}, {s})"
            )
        self.shape = GrammarShape(nt, pt, vocab)

    @classmethod
    def uniform(cls, shape: GrammarShape) -> "RuleTable":
        nt, pt, s = shape.num_nonterminals, shape.num_preterminals, shape.num_symbols
        return cls(
            torch.full((nt,), -math.log(nt), dtype=_DTYPE),
            torch.full((nt, s, s), -math.log(s * s), dtype=_DTYPE),
            torch.full((pt, shape.vocab_size), -math.log(shape.vocab_size), dtype=_DTYPE),
        )

    @classmethod
    def random_normalized(cls, shape: GrammarShape, seed: int, concentration: float = 1.0) -> "RuleTable":
        """Seeded random grammar; larger concentration means peakier rules."""
        gen = torch.Generator().manual_seed(seed)
        nt, pt, s = shape.num_nonterminals, shape.num_preterminals, shape.num_symbols

        def draw(*dims):
            raw = torch.randn(*dims, generator=gen, dtype=_DTYPE) * concentration
            return torch.log_softmax(raw, dim=-1)

        start = draw(nt)
        binary = draw(nt, s * s).view(nt, s, s)
        preterm = draw(pt, shape.vocab_size)
        return cls(start, binary, preterm)


def cluster_grammar(num_clusters: int = 4, words_per_cluster: int = 8,
                    p_recurse: float = 0.45, p_grow: float = 0.35,
                    emission_seed: int = 5, emission_overlap: float = None) -> RuleTable:
    """Segment-structured grammar: one nonterminal and one preterminal own each
    vocabulary cluster, and a composition nonterminal concatenates segments.

    Sentences are sequences of cluster-pure segments; the gold constituents are
    the segments and their left-recursive insides. With `emission_overlap`
    set, emissions become Gaussian bumps of that width on a circular vocabulary
    instead of disjoint blocks, so neighboring clusters share words and segment
    boundaries are ambiguous from text alone. Useful for experiments where span
    content must predict the covering symbol (e.g. grounded training).
    """
    c = num_clusters
    nt = 1 + c
    pt = c
    vocab = c * words_per_cluster
    s = nt + pt
    start = torch.full((nt,), NEG_INF, dtype=_DTYPE)
    start[0] = 0.0
    binary = torch.full((nt, s, s), NEG_INF, dtype=_DTYPE)
    combos = [(1 + i, 1 + j) for i in range(c) for j in range(c)]
    for i, j in combos:
        binary[0, i, j] = math.log((1 - p_grow) / len(combos))
    for k in range(c):
        binary[0, 0, 1 + k] = math.log(p_grow / c)
    for k in range(c):
        seg, term = 1 + k, nt + k
        binary[seg, term, term] = math.log(1 - p_recurse)
        binary[seg, seg, term] = math.log(p_recurse)
    if emission_overlap is not None:
        preterm = torch.zeros(pt, vocab, dtype=_DTYPE)
        for k in range(c):
            center = (k + 0.5) * vocab / c
            for w in range(vocab):
                dist = min(abs(w - center), vocab - abs(w - center))
                preterm[k, w] = -0.5 * (dist / emission_overlap) ** 2
        preterm = torch.log_softmax(preterm, dim=1)
    else:
        preterm = torch.full((pt, vocab), NEG_INF, dtype=_DTYPE)
        gen = torch.Generator().manual_seed(emission_seed)
        for k in range(c):
            lo = k * words_per_cluster
            raw = torch.randn(words_per_cluster, generator=gen, dtype=_DTYPE)
            preterm[k, lo:lo + words_per_cluster] = torch.log_softmax(raw, dim=0)
    return RuleTable(start, binary, preterm)


@dataclass
class ValidationReport:
    mode: str
    passed: bool
    max_error: float
    family_errors: dict
    problems: list


def validate_grammar(table: RuleTable, mode: str = "normalized", tol: float = 1e-6) -> ValidationReport:
    """Check normalization (or mere finiteness) of every rule distribution.

    Normalized mode: the start vector, each per-parent binary slice, and each
    preterminal row must log-sum-exp to zero within `tol`. Potential mode only
    rejects NaN and +inf; -inf stays legal as "forbidden rule".
    """
    if mode not in ("normalized", "potential"):
        raise ValueError(f"unknown validation mode {mode!r}")
    problems = []
    for name, t in (("start", table.start_logp), ("binary", table.binary_logp),
                    ("preterm", table.preterm_logp)):
        if torch.isnan(t).any():
            idx = torch.nonzero(torch.isnan(t))[0].tolist()
            problems.append(f"NaN in {name} table at {idx}")
        if torch.isposinf(t).any():
            idx = torch.nonzero(torch.isposinf(t))[0].tolist()
            problems.append(f"+inf in {name} table at {idx}")

    family_errors = {}
    if mode == "normalized" and not problems:
        nt = table.shape.num_nonterminals
        family_errors["start"] = abs(torch.logsumexp(table.start_logp, 0).item())
        family_errors["binary"] = max(
            abs(torch.logsumexp(table.binary_logp[a].reshape(-1), 0).item()) for a in range(nt)
        )
        family_errors["preterm"] = torch.logsumexp(table.preterm_logp, 1).abs().max().item()
    max_error = max(family_errors.values()) if family_errors else 0.0
    passed = not problems and (mode == "potential" or max_error < tol)
    return ValidationReport(mode, passed, max_error, family_errors, problems)


class TreeNode:
    """One node of a binary parse tree over token span [start, end)."""

    __slots__ = ("start", "end", "split", "symbol", "left", "right")

    def __init__(self, start, end, split=None, symbol=None, left=None, right=None):
        self.start = start
        self.end = end
        self.split = split
        self.symbol = symbol  # nonterminal index internally, preterminal index on leaves
        self.left = left
        self.right = right

    @property
    def is_leaf(self):
        return self.left is None

    def __repr__(self):
        if self.is_leaf:
            return f"Leaf({self.start},{self.end},T={self.symbol})"
        return f"Node({self.start},{self.end},k={self.split})"


class ParseTree:
    """Binary constituency tree over a sentence of `n` tokens."""

    __slots__ = ("root", "n")

    def __init__(self, root: TreeNode, n: int):
        self.root = root
        self.n = n
        self._validate()

    def _validate(self):
        if self.root.start != 0 or self.root.end != self.n:
            raise StructuralError(f"root span ({self.root.start},{self.root.end}) != (0,{self.n})")
        internal = 0
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                if node.end - node.start != 1:
                    raise StructuralError(f"leaf with span ({node.start},{node.end})")
                continue
            internal += 1
            k = node.split
            if not (node.start < k < node.end):
                raise StructuralError(f"split {k} outside span ({node.start},{node.end})")
            if (node.left.start, node.left.end) != (node.start, k) or (
                node.right.start,
                node.right.end,
            ) != (k, node.end):
                raise StructuralError("children do not tile the parent span")
            stack.append(node.left)
            stack.append(node.right)
        if self.n >= 2 and internal != self.n - 1:
            raise StructuralError(f"{internal} internal nodes for n={self.n}")

    def internal_spans(self):
        """Spans of internal nodes, in prefix order."""
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                continue
            out.append((node.start, node.end))
            stack.append(node.right)
            stack.append(node.left)
        return out

    def leaves(self):
        out = []

        def walk(node):
            if node.is_leaf:
                out.append(node)
            else:
                walk(node.left)
                walk(node.right)

        walk(self.root)
        return out

    def __eq__(self, other):
        if not isinstance(other, ParseTree) or self.n != other.n:
            return False
        return set(self.internal_spans()) == set(other.internal_spans())

    def __repr__(self):
        return f"ParseTree(n={self.n}, spans={sorted(self.internal_spans())})"


def tree_to_spans(tree: ParseTree, policy: SpanPolicy = DEFAULT_SPAN_POLICY) -> SpanSet:
    """Project a tree onto its unlabeled span view under a trivial-span policy."""
    spans = set(tree.internal_spans())
    if policy.include_width_one:
        spans.update((leaf.start, leaf.end) for leaf in tree.leaves())
    if not policy.include_whole_sentence:
        spans.discard((0, tree.n))
    if not policy.include_width_one:
        spans = {(i, j) for i, j in spans if j - i >= 2}
    return SpanSet(spans, n=tree.n)


def spans_from_raw(spans, n, policy: SpanPolicy = DEFAULT_SPAN_POLICY, labels=None) -> SpanSet:
    """Build a SpanSet from raw (i, j) pairs, applying the trivial-span policy."""
    kept = set()
    for i, j in spans:
        if j - i < 2 and not policy.include_width_one:
            continue
        if (i, j) == (0, n) and not policy.include_whole_sentence:
            continue
        kept.add((i, j))
    kept_labels = None
    if labels is not None:
        kept_labels = {s: l for s, l in labels.items() if s in kept}
    return SpanSet(kept, labels=kept_labels, n=n)


# ---------------------------------------------------------------------------
# Sampling

def sample_sentence(table: RuleTable, max_length: int, rng_seed=None, rng=None):
    """Ancestral top-down sample; returns (Sentence, ParseTree) or None.

    None signals rejection: the partial yield exceeded max_length. Since every
    pending symbol expands to at least one token, aborting early is
    distribution-equivalent to finishing the sample and then rejecting it.
    """
    report = validate_grammar(table, "normalized")
    if not report.passed:
        raise ValidationError(f"sampling needs a normalized table: {report}")
    if rng is None:
        rng = random.Random(rng_seed)
    nt = table.shape.num_nonterminals

    start_p = table.start_logp.exp().tolist()
    binary_p = table.binary_logp.exp().reshape(nt, -1).tolist()
    preterm_p = table.preterm_logp.exp().tolist()
    s = table.shape.num_symbols

    root_sym = rng.choices(range(nt), weights=start_p)[0]
    tokens = []
    pending = [1]  # unexpanded symbols; every one yields >= 1 token

    def expand(symbol):
        if symbol >= nt:  # preterminal -> word
            word = rng.choices(range(table.shape.vocab_size), weights=preterm_p[symbol - nt])[0]
            i = len(tokens)
            tokens.append(word)
            pending[0] -= 1
            return TreeNode(i, i + 1, symbol=symbol - nt)
        pair = rng.choices(range(s * s), weights=binary_p[symbol])[0]
        b, c = divmod(pair, s)
        pending[0] += 1  # symbol replaced by two children
        if len(tokens) + pending[0] > max_length:
            return None  # no completion can fit: reject early
        left = expand(b)
        if left is None:
            return None
        right = expand(c)
        if right is None:
            return None
        node = TreeNode(left.start, right.end, split=left.end, symbol=symbol)
        node.left, node.right = left, right
        return node

    root = expand(root_sym)
    if root is None:
        return None
    return Sentence(tokens), ParseTree(root, len(tokens))


def sample_corpus(table: RuleTable, num_sentences: int, max_length: int, rng_seed: int):
    """Collect `num_sentences` accepted samples from one seeded stream."""
    rng = random.Random(rng_seed)
    out = []
    attempts = 0
    max_attempts = max(1000, 1000 * num_sentences)
    while len(out) < num_sentences:
        attempts += 1
        if attempts > max_attempts:
            raise DegenerateInputError(
                f"rejection rate too high: {len(out)} accepted in {attempts} attempts"
            )
        sample = sample_sentence(table, max_length, rng=rng)
        if sample is not None:
            out.append(sample)
    return out


def tree_log_prob(table: RuleTable, sentence: Sentence, tree: ParseTree) -> float:
    """Log-probability of one tree; max over symbol assignments if unlabeled.

    Trees carrying full symbol annotations are scored exactly; for trees
    without symbols (e.g. MBR decodes) this returns the best assignment's
    log-probability for the fixed bracketing.
    """
    nt = table.shape.num_nonterminals
    pt = table.shape.num_preterminals
    s = table.shape.num_symbols

    def score_vec(node):
        # log score per candidate symbol of this node, in joint indexing
        vec = torch.full((s,), NEG_INF, dtype=_DTYPE)
        if node.is_leaf:
            col = table.preterm_logp[:, sentence.tokens[node.start]]
            if node.symbol is not None:
                vec[nt + node.symbol] = col[node.symbol]
            else:
                vec[nt:] = col
            return vec
        left = score_vec(node.left)
        right = score_vec(node.right)
        combined = table.binary_logp + left.view(1, s, 1) + right.view(1, 1, s)
        per_parent = combined.view(nt, -1).max(dim=1).values
        if node.symbol is not None:
            vec[node.symbol] = per_parent[node.symbol]
        else:
            vec[:nt] = per_parent
        return vec

    if len(sentence) == 1:
        col = table.preterm_logp[:, sentence.tokens[0]]
        return col.max().item()
    root = score_vec(tree.root)
    return (table.start_logp + root[:nt]).max().item()


# ---------------------------------------------------------------------------
# Bracketed-tree serialization: (A0 (T1 word) (A2 ...)), one tree per line.

_SYM_RE = re.compile(r"^([AT])(\d+)$")


def tree_to_bracket(tree: ParseTree, raw_tokens) -> str:
    def render(node):
        if node.is_leaf:
            label = f"T{node.symbol}" if node.symbol is not None else "T"
            return f"({label} {raw_tokens[node.start]})"
        label = f"A{node.symbol}" if node.symbol is not None else "X"
        return f"({label} {render(node.left)} {render(node.right)})"

    return render(tree.root)


def bracket_to_tree(line: str):
    """Parse one serialized binary tree; returns (ParseTree, raw_tokens)."""
    tokens = re.findall(r"\(|\)|[^\s()]+", line)
    pos = 0
    words = []

    def parse():
        nonlocal pos
        if pos >= len(tokens) or tokens[pos] != "(":
            raise StructuralError(f"expected '(' at token {pos} of {line!r}")
        pos += 1
        if pos >= len(tokens):
            raise StructuralError("unbalanced parentheses")
        label = tokens[pos]
        pos += 1
        children = []
        leaf_word = None
        while pos < len(tokens) and tokens[pos] != ")":
            if tokens[pos] == "(":
                children.append(parse())
            else:
                leaf_word = tokens[pos]
                pos += 1
        if pos >= len(tokens):
            raise StructuralError("unbalanced parentheses")
        pos += 1  # consume ')'
        m = _SYM_RE.match(label)
        sym = int(m.group(2)) if m else None
        if leaf_word is not None and not children:
            i = len(words)
            words.append(leaf_word)
            return TreeNode(i, i + 1, symbol=sym if (m and m.group(1) == "T") else None)
        if len(children) != 2:
            raise StructuralError(f"non-binary node with {len(children)} children")
        left, right = children
        node = TreeNode(left.start, right.end, split=left.end,
                        symbol=sym if (m and m.group(1) == "A") else None)
        node.left, node.right = left, right
        return node

    root = parse()
    if pos != len(tokens):
        raise StructuralError(f"trailing content after tree in {line!r}")
    if root.is_leaf:
        return ParseTree(root, 1), words
    return ParseTree(root, root.end), words


def right_branching_tree(n: int) -> ParseTree:
    if n < 2:
        raise DegenerateInputError(f"branching tree needs n >= 2, got {n}")

    def build(i, j):
        if j - i == 1:
            return TreeNode(i, j)
        node = TreeNode(i, j, split=i + 1)
        node.left = TreeNode(i, i + 1)
        node.right = build(i + 1, j)
        return node

    return ParseTree(build(0, n), n)


def left_branching_tree(n: int) -> ParseTree:
    if n < 2:
        raise DegenerateInputError(f"branching tree needs n >= 2, got {n}")

    def build(i, j):
        if j - i == 1:
            return TreeNode(i, j)
        node = TreeNode(i, j, split=j - 1)
        node.left = build(i, j - 1)
        node.right = TreeNode(j - 1, j)
        return node

    return ParseTree(build(0, n), n)
