"""Unlabeled bracketing F1 (sentence- and corpus-level), structural
baselines, and the tree-permutation baseline.

The trivial-span policy (no whole-sentence span, no width-1 spans) is applied
to both prediction and gold before matching; sentences where both sides are
empty score (1, 1, 1) and stay in the averages.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .errors import DataError, DegenerateInputError, StructuralError
from .grammar import ParseTree, SpanSet, left_branching_tree, right_branching_tree, tree_to_spans


@dataclass
class EvalRecord:
    sent_id: str
    length: int
    pred: SpanSet
    gold: SpanSet
    unknown_count: int = 0
    precision: float = None
    recall: float = None
    f1: float = None

    def score(self):
        self.precision, self.recall, self.f1 = sentence_f1(self.pred, self.gold, self.length)
        return self


@dataclass
class MetricsReport:
    corpus_precision: float
    corpus_recall: float
    corpus_f1: float
    sentence_f1: float
    tp: int
    fp: int
    fn: int
    num_sentences: int
    by_length: dict = field(default_factory=dict)  # length -> (count, mean S-F1)


def sentence_f1(pred: SpanSet, gold: SpanSet, n: int = None):
    """Set-overlap precision/recall/F1 for one sentence."""
    if n is not None:
        for spans in (pred.spans, gold.spans):
            for i, j in spans:
                if j > n:
                    raise StructuralError(f"span ({i}, {j}) exceeds sentence length {n}")
    if not pred.spans and not gold.spans:
        return 1.0, 1.0, 1.0
    hits = len(pred.spans & gold.spans)
    p = hits / len(pred.spans) if pred.spans else 0.0
    r = hits / len(gold.spans) if gold.spans else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def corpus_f1(records) -> MetricsReport:
    """Pool TP/FP/FN over all sentences; also report mean sentence F1."""
    records = list(records)
    if not records:
        raise DataError("no records to evaluate")
    tp = fp = fn = 0
    s_f1_sum = 0.0
    by_length = {}
    for rec in records:
        if rec.f1 is None:
            rec.score()
        hits = len(rec.pred.spans & rec.gold.spans)
        tp += hits
        fp += len(rec.pred.spans) - hits
        fn += len(rec.gold.spans) - hits
        s_f1_sum += rec.f1
        cnt, acc = by_length.get(rec.length, (0, 0.0))
        by_length[rec.length] = (cnt + 1, acc + rec.f1)
    if tp + fp == 0 and tp + fn == 0:
        cp = cr = cf = 1.0
    else:
        cp = tp / (tp + fp) if tp + fp else 0.0
        cr = tp / (tp + fn) if tp + fn else 0.0
        cf = 2 * cp * cr / (cp + cr) if cp + cr > 0 else 0.0
    return MetricsReport(
        corpus_precision=cp,
        corpus_recall=cr,
        corpus_f1=cf,
        sentence_f1=s_f1_sum / len(records),
        tp=tp,
        fp=fp,
        fn=fn,
        num_sentences=len(records),
        by_length={n: (c, acc / c) for n, (c, acc) in sorted(by_length.items())},
    )


def branching_baseline(n: int, direction: str) -> ParseTree:
    if n < 2:
        raise DegenerateInputError(f"branching baseline needs n >= 2, got {n}")
    if direction == "right":
        return right_branching_tree(n)
    if direction == "left":
        return left_branching_tree(n)
    raise DataError(f"unknown branching direction {direction!r}")


def branching_spans(n: int, direction: str) -> SpanSet:
    return tree_to_spans(branching_baseline(n, direction))


def perm_baseline(predictions, rng_seed: int):
    """Shuffle predicted structures among same-length sentences.

    `predictions` is a list of (length, payload); payloads are exchanged
    within each length group by one seeded permutation, preserving the
    per-group multiset. Groups of size one are untouched.
    """
    rng = random.Random(rng_seed)
    by_length = {}
    for pos, (length, _payload) in enumerate(predictions):
        by_length.setdefault(length, []).append(pos)
    out = [payload for _length, payload in predictions]
    for length in sorted(by_length):
        positions = by_length[length]
        if len(positions) < 2:
            continue
        payloads = [predictions[p][1] for p in positions]
        rng.shuffle(payloads)
        for p, payload in zip(positions, payloads):
            out[p] = payload
    return out
