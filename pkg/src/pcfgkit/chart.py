"""Log-semiring dynamic programming over the three-schema grammar.

Inside/outside chart fills, span posteriors, expected rule counts, MBR and
Viterbi decoding, plus brute-force enumeration oracles used by the tests.
Charts index cells as [start, end, symbol] with the joint symbol alphabet
(nonterminals first, then preterminals); width-1 cells hold preterminal
scores, width>=2 cells hold nonterminal scores, and structurally impossible
slots stay at -inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DegenerateInputError, NoParseError, StructuralError
from .grammar import NEG_INF, ParseTree, RuleTable, Sentence, TreeNode

_DTYPE = torch.float64


@dataclass
class InsideChart:
    beta: torch.Tensor  # [n+1, n+1, S]
    log_marginal: float
    n: int


@dataclass
class OutsideChart:
    alpha: torch.Tensor  # [n+1, n+1, S]
    n: int


@dataclass
class PosteriorTable:
    span_post: torch.Tensor  # [n+1, n+1], width >= 2 entries only
    n: int
    rule_post: "CountTable" = None

    def total_mass(self) -> float:
        return self.span_post.sum().item()


@dataclass
class CountTable:
    start: torch.Tensor  # [nt]
    binary: torch.Tensor  # [nt, S, S]
    preterm: torch.Tensor  # [pt, vocab]


def _check_sentence(table: RuleTable, sentence: Sentence):
    n = len(sentence)
    if n < 2:
        raise DegenerateInputError(f"chart operations need n >= 2, got n={n}")
    vocab = table.shape.vocab_size
    for t in sentence.tokens:
        if not (0 <= t < vocab):
            raise StructuralError(f"token index {t} outside vocabulary of size {vocab}")
    return n


# ---------------------------------------------------------------------------
# Batched fills. These are the only places the CKY recursions are written;
# everything else (public ops, the trainer's loss) goes through them. Inputs
# may require grad; normalized tables keep every logsumexp slice partially
# finite, so gradients stay NaN-free.

def inside_fill(start_logp: torch.Tensor, binary_logp: torch.Tensor, pre_cols: torch.Tensor):
    """CKY inside pass over a batch of same-length sentences.

    start_logp [B, nt], binary_logp [B, nt, S, S], pre_cols [B, n, pt]
    (pre_cols[b, i, t] = log p(T_t -> w_i) for sentence b). Returns
    (beta [B, n+1, n+1, S], log_marginal [B]).
    """
    bsz, n, pt = pre_cols.shape
    nt = start_logp.shape[1]
    s = nt + pt
    beta = torch.full((bsz, n + 1, n + 1, s), NEG_INF, dtype=_DTYPE)
    bidx = torch.arange(bsz)[:, None]

    ii = torch.arange(n)
    leaf_vals = torch.cat(
        [torch.full((bsz, n, nt), NEG_INF, dtype=_DTYPE), pre_cols.to(_DTYPE)], dim=-1
    )
    beta = beta.index_put((bidx, ii[None, :], (ii + 1)[None, :]), leaf_vals)

    for w in range(2, n + 1):
        starts = torch.arange(n - w + 1)
        offs = torch.arange(1, w)
        li = starts[:, None].expand(-1, w - 1)
        mid = li + offs[None, :]
        rj = (starts + w)[:, None].expand(-1, w - 1)
        left = beta[:, li, mid]  # [B, M, w-1, S]
        right = beta[:, mid, rj]  # [B, M, w-1, S]
        # one joint reduction over (split, left symbol, right symbol): every
        # (parent, cell) slice keeps finite entries, so backward stays NaN-free
        t = (
            left[:, :, :, None, :, None]
            + right[:, :, :, None, None, :]
            + binary_logp[:, None, None]
        )  # [B, M, w-1, nt, S, S]
        cell = torch.logsumexp(t, dim=(2, 4, 5))  # [B, M, nt]
        vals = torch.cat(
            [cell, torch.full((bsz, cell.shape[1], pt), NEG_INF, dtype=_DTYPE)], dim=-1
        )
        beta = beta.index_put((bidx, starts[None, :], (starts + w)[None, :]), vals)

    log_marginal = torch.logsumexp(start_logp + beta[:, 0, n, :nt], dim=-1)
    return beta, log_marginal


def outside_fill(start_logp: torch.Tensor, binary_logp: torch.Tensor, beta: torch.Tensor):
    """Companion outside pass; returns alpha [B, n+1, n+1, S]."""
    bsz, n_plus, _, s = beta.shape
    n = n_plus - 1
    nt = start_logp.shape[1]
    pt = s - nt
    alpha = torch.full_like(beta, NEG_INF)
    bidx = torch.arange(bsz)[:, None]

    root = torch.cat([start_logp, torch.full((bsz, pt), NEG_INF, dtype=_DTYPE)], dim=-1)
    alpha = alpha.index_put(
        (bidx, torch.zeros(1, 1, dtype=torch.long), torch.full((1, 1), n, dtype=torch.long)),
        root.unsqueeze(1),
    )

    for v in range(n - 1, 0, -1):
        m_v = n - v + 1
        contribs = []
        for w in range(v + 1, n + 1):
            delta = w - v
            # child is the left sibling: parent (i, i+w), sibling (i+v, i+w)
            ip = torch.arange(n - w + 1)
            par = alpha[:, ip, ip + w, :nt]  # [B, Mw, nt]
            sib = beta[:, ip + v, ip + w]  # [B, Mw, S]
            t = (
                par.unsqueeze(-1).unsqueeze(-1)
                + binary_logp.unsqueeze(1)
                + sib.unsqueeze(2).unsqueeze(3)
            )  # [B, Mw, nt(A), S(child), S(sib)]
            c_left = torch.logsumexp(t, dim=(2, 4))
            contribs.append(F.pad(c_left, (0, 0, 0, delta), value=NEG_INF))
            # child is the right sibling: parent (j-w, j), sibling (j-w, j-v)
            jp = torch.arange(w, n + 1)
            par2 = alpha[:, jp - w, jp, :nt]
            sib2 = beta[:, jp - w, jp - v]
            t2 = (
                par2.unsqueeze(-1).unsqueeze(-1)
                + binary_logp.unsqueeze(1)
                + sib2.unsqueeze(2).unsqueeze(4)
            )  # [B, Mw, nt(A), S(sib), S(child)]
            c_right = torch.logsumexp(t2, dim=(2, 3))
            contribs.append(F.pad(c_right, (0, 0, delta, 0), value=NEG_INF))
        level = torch.logsumexp(torch.stack(contribs, dim=0), dim=0)
        iv = torch.arange(m_v)
        alpha = alpha.index_put((bidx, iv[None, :], (iv + v)[None, :]), level)
    return alpha


def posterior_cells(alpha: torch.Tensor, beta: torch.Tensor, log_marginal: torch.Tensor):
    """Batched width>=2 span posteriors, differentiable through both charts.

    alpha/beta [B, n+1, n+1, S], log_marginal [B] -> [B, n+1, n+1] with zeros
    outside valid cells. Only valid cells enter logsumexp, keeping gradients
    NaN-free.
    """
    bsz, n1 = beta.shape[0], beta.shape[1]
    n = n1 - 1
    ii, jj = [], []
    for w in range(2, n + 1):
        for i in range(0, n - w + 1):
            ii.append(i)
            jj.append(i + w)
    ii = torch.tensor(ii, dtype=torch.long)
    jj = torch.tensor(jj, dtype=torch.long)
    joint = torch.logsumexp(alpha[:, ii, jj] + beta[:, ii, jj], dim=-1)  # [B, M]
    vals = torch.exp(joint - log_marginal.unsqueeze(1))
    post = torch.zeros(bsz, n1, n1, dtype=beta.dtype)
    bidx = torch.arange(bsz)[:, None]
    return post.index_put((bidx, ii[None, :], jj[None, :]), vals)


def _preterm_cols(table: RuleTable, sentence: Sentence) -> torch.Tensor:
    tokens = torch.tensor(sentence.tokens, dtype=torch.long)
    return table.preterm_logp[:, tokens].T.unsqueeze(0)  # [1, n, pt]


# ---------------------------------------------------------------------------
# Public per-sentence operations

def inside(table: RuleTable, sentence: Sentence) -> InsideChart:
    """Inside algorithm: marginalize parse trees; O(n^3 |G|) CKY fill."""
    n = _check_sentence(table, sentence)
    with torch.no_grad():
        beta, logz = inside_fill(
            table.start_logp.unsqueeze(0),
            table.binary_logp.unsqueeze(0),
            _preterm_cols(table, sentence),
        )
    return InsideChart(beta[0], logz[0].item(), n)


def outside(table: RuleTable, sentence: Sentence, inside_chart: InsideChart) -> OutsideChart:
    n = _check_sentence(table, sentence)
    if inside_chart.n != n:
        raise StructuralError(f"inside chart built for n={inside_chart.n}, sentence has n={n}")
    with torch.no_grad():
        alpha = outside_fill(
            table.start_logp.unsqueeze(0),
            table.binary_logp.unsqueeze(0),
            inside_chart.beta.unsqueeze(0),
        )
    return OutsideChart(alpha[0], n)


def span_posteriors(inside_chart: InsideChart, outside_chart: OutsideChart) -> PosteriorTable:
    """P(some constituent covers (i, j) | sentence), for widths >= 2."""
    n = inside_chart.n
    if outside_chart.n != n:
        raise StructuralError("inside/outside charts disagree on sentence length")
    logz = inside_chart.log_marginal
    if logz == NEG_INF:
        raise NoParseError("sentence has zero marginal probability")
    joint = torch.logsumexp(inside_chart.beta + outside_chart.alpha, dim=-1)
    post = torch.zeros((n + 1, n + 1), dtype=_DTYPE)
    for w in range(2, n + 1):
        for i in range(0, n - w + 1):
            post[i, i + w] = torch.exp(joint[i, i + w] - logz)
    return PosteriorTable(post, n)


def expected_rule_counts(
    table: RuleTable, sentence: Sentence, inside_chart: InsideChart, outside_chart: OutsideChart
) -> CountTable:
    """Posterior expected occurrence count of every rule.

    Equals the gradient of log p(w) with respect to each rule log-potential
    when the table entries are treated as free parameters.
    """
    n = _check_sentence(table, sentence)
    logz = inside_chart.log_marginal
    if logz == NEG_INF:
        raise NoParseError("sentence has zero marginal probability")
    nt = table.shape.num_nonterminals
    pt = table.shape.num_preterminals
    beta, alpha = inside_chart.beta, outside_chart.alpha

    start_c = torch.exp(table.start_logp + beta[0, n, :nt] - logz)

    binary_c = torch.zeros_like(table.binary_logp)
    for w in range(2, n + 1):
        starts = torch.arange(n - w + 1)
        offs = torch.arange(1, w)
        li = starts[:, None].expand(-1, w - 1)
        mid = li + offs[None, :]
        rj = (starts + w)[:, None].expand(-1, w - 1)
        left = beta[li, mid]  # [M, K, S]
        right = beta[mid, rj]
        par = alpha[starts, starts + w, :nt]  # [M, nt]
        log_contrib = (
            par[:, None, :, None, None]
            + table.binary_logp[None, None]
            + left[:, :, None, :, None]
            + right[:, :, None, None, :]
            - logz
        )
        binary_c = binary_c + torch.exp(log_contrib).sum(dim=(0, 1))

    preterm_c = torch.zeros_like(table.preterm_logp)
    for i, tok in enumerate(sentence.tokens):
        p_i = torch.exp(alpha[i, i + 1, nt:] + table.preterm_logp[:, tok] - logz)
        preterm_c[:, tok] += p_i
    return CountTable(start_c, binary_c, preterm_c)


def mbr_decode(posteriors: PosteriorTable) -> ParseTree:
    """Tree maximizing the sum of posterior span probabilities.

    best(i, j) = post[i, j] + max_k best(i, k) + best(k, j); ties break
    toward the smallest split point.
    """
    n = posteriors.n
    if n < 2:
        raise DegenerateInputError("MBR decoding needs n >= 2")
    post = posteriors.span_post.numpy()
    best = np.zeros((n + 1, n + 1))
    split = np.full((n + 1, n + 1), -1, dtype=int)
    for w in range(2, n + 1):
        for i in range(0, n - w + 1):
            j = i + w
            cand = best[i, i + 1 : j] + best[i + 1 : j, j]
            k = int(np.argmax(cand))  # first max: smallest split
            best[i, j] = post[i, j] + cand[k]
            split[i, j] = i + 1 + k

    def build(i, j):
        if j - i == 1:
            return TreeNode(i, j)
        k = split[i, j]
        node = TreeNode(i, j, split=int(k))
        node.left = build(i, k)
        node.right = build(k, j)
        return node

    return ParseTree(build(0, n), n)


def viterbi_decode(table: RuleTable, sentence: Sentence):
    """Most probable tree under the grammar; returns (ParseTree, log_prob).

    Ties break toward the smallest split, then the smallest symbol indices
    (flattened (split, left-symbol, right-symbol) order).
    """
    n = _check_sentence(table, sentence)
    nt = table.shape.num_nonterminals
    s = table.shape.num_symbols
    binary = table.binary_logp.numpy()
    preterm = table.preterm_logp.numpy()

    best = np.full((n + 1, n + 1, s), NEG_INF)
    back = {}
    for i, tok in enumerate(sentence.tokens):
        best[i, i + 1, nt:] = preterm[:, tok]
    for w in range(2, n + 1):
        for i in range(0, n - w + 1):
            j = i + w
            # cand[k-i-1, B, C] = best(i,k,B) + best(k,j,C)
            cand = best[i, i + 1 : j, :, None] + best[i + 1 : j, j, None, :]
            scored = cand[:, None, :, :] + binary[None, :, :, :]  # [K, nt, S, S]
            flat = scored.transpose(1, 0, 2, 3).reshape(nt, -1)
            arg = np.argmax(flat, axis=1)  # first max: smallest (k, B, C)
            best[i, j, :nt] = flat[np.arange(nt), arg]
            for a in range(nt):
                k_off, rest = divmod(int(arg[a]), s * s)
                b, c = divmod(rest, s)
                back[(i, j, a)] = (i + 1 + k_off, b, c)

    root_scores = table.start_logp.numpy() + best[0, n, :nt]
    root_sym = int(np.argmax(root_scores))
    log_prob = float(root_scores[root_sym])
    if log_prob == NEG_INF:
        raise NoParseError("no parse exists for this sentence")

    def build(i, j, sym):
        if j - i == 1:
            return TreeNode(i, j, symbol=sym - nt)
        k, b, c = back[(i, j, sym)]
        node = TreeNode(i, j, split=k, symbol=sym)
        node.left = build(i, k, b)
        node.right = build(k, j, c)
        return node

    return ParseTree(build(0, n, root_sym), n), log_prob


# ---------------------------------------------------------------------------
# Brute-force oracles (pure numpy; independent of the chart fills above)

def _np_logsumexp(values):
    arr = np.asarray(values, dtype=float)
    m = arr.max() if arr.size else NEG_INF
    if m == NEG_INF:
        return NEG_INF
    return m + np.log(np.exp(arr - m).sum())


def enumerate_bracketings(i: int, j: int):
    """All binary bracketings of span [i, j) as nested (i, j, left, right) tuples."""
    if j - i == 1:
        return [(i, j, None, None)]
    out = []
    for k in range(i + 1, j):
        for left in enumerate_bracketings(i, k):
            for right in enumerate_bracketings(k, j):
                out.append((i, j, left, right))
    return out


def _bracketing_spans(tree):
    i, j, left, right = tree
    if left is None:
        return []
    return [(i, j)] + _bracketing_spans(left) + _bracketing_spans(right)


def _score_bracketing(tree, start, binary, preterm, tokens, nt, semiring):
    """Per-symbol score vector of one fixed bracketing (joint indexing)."""
    s = binary.shape[1]
    reduce = _np_logsumexp if semiring == "sum" else max

    def vec(node):
        i, j, left, right = node
        out = np.full(s, NEG_INF)
        if left is None:
            out[nt:] = preterm[:, tokens[i]]
            return out
        lv, rv = vec(left), vec(right)
        for a in range(nt):
            terms = binary[a] + lv[:, None] + rv[None, :]
            out[a] = reduce(terms.reshape(-1))
        return out

    root = vec(tree)
    return reduce([start[a] + root[a] for a in range(nt)])


def brute_force_marginal(table: RuleTable, sentence: Sentence, max_n: int = 8) -> float:
    """log p(w) by explicit enumeration of every bracketing."""
    n = len(sentence)
    if n > max_n:
        raise DegenerateInputError(f"brute force refused for n={n} > max_n={max_n}")
    if n < 2:
        raise DegenerateInputError("brute force needs n >= 2")
    start = table.start_logp.numpy()
    binary = table.binary_logp.numpy()
    preterm = table.preterm_logp.numpy()
    nt = table.shape.num_nonterminals
    scores = [
        _score_bracketing(t, start, binary, preterm, sentence.tokens, nt, "sum")
        for t in enumerate_bracketings(0, n)
    ]
    return float(_np_logsumexp(scores))


def brute_force_best(table: RuleTable, sentence: Sentence, max_n: int = 8):
    """(best bracketing spans, best log prob) by enumeration; max over symbols."""
    n = len(sentence)
    if n > max_n:
        raise DegenerateInputError(f"brute force refused for n={n} > max_n={max_n}")
    start = table.start_logp.numpy()
    binary = table.binary_logp.numpy()
    preterm = table.preterm_logp.numpy()
    nt = table.shape.num_nonterminals
    best_spans, best_score = None, NEG_INF
    for t in enumerate_bracketings(0, n):
        sc = _score_bracketing(t, start, binary, preterm, sentence.tokens, nt, "max")
        if sc > best_score:
            best_score, best_spans = sc, set(_bracketing_spans(t))
    return best_spans, float(best_score)


def brute_force_span_posteriors(table: RuleTable, sentence: Sentence, max_n: int = 8):
    """Posterior span probabilities by enumerating bracketings."""
    n = len(sentence)
    start = table.start_logp.numpy()
    binary = table.binary_logp.numpy()
    preterm = table.preterm_logp.numpy()
    nt = table.shape.num_nonterminals
    if n > max_n:
        raise DegenerateInputError(f"brute force refused for n={n} > max_n={max_n}")
    trees = enumerate_bracketings(0, n)
    logps = [
        _score_bracketing(t, start, binary, preterm, sentence.tokens, nt, "sum") for t in trees
    ]
    logz = _np_logsumexp(logps)
    if logz == NEG_INF:
        raise NoParseError("no parse exists")
    post = np.zeros((n + 1, n + 1))
    for t, lp in zip(trees, logps):
        for (i, j) in _bracketing_spans(t):
            post[i, j] += np.exp(lp - logz)
    return post


def brute_force_mbr_objective(posteriors: PosteriorTable, max_n: int = 9) -> float:
    """Best achievable posterior-span sum over all bracketings."""
    n = posteriors.n
    if n > max_n:
        raise DegenerateInputError(f"brute force refused for n={n} > max_n={max_n}")
    post = posteriors.span_post.numpy()
    return max(
        sum(post[i, j] for i, j in _bracketing_spans(t)) for t in enumerate_bracketings(0, n)
    )


def mbr_objective(posteriors: PosteriorTable, tree: ParseTree) -> float:
    post = posteriors.span_post.numpy()
    return float(sum(post[i, j] for i, j in tree.internal_spans()))
