import pytest

from pcfgkit.errors import DataError, DegenerateInputError, StructuralError
from pcfgkit.evaluation import (EvalRecord, branching_spans, corpus_f1, perm_baseline,
                                sentence_f1)
from pcfgkit.grammar import SpanSet, tree_to_spans
from pcfgkit.grammar import right_branching_tree


def spans(*pairs):
    return SpanSet(pairs)


class TestSentenceF1:
    def test_exact_match(self):
        assert sentence_f1(spans((0, 2), (2, 5)), spans((0, 2), (2, 5))) == (1.0, 1.0, 1.0)

    def test_disjoint_nonempty(self):
        assert sentence_f1(spans((0, 2)), spans((1, 3))) == (0.0, 0.0, 0.0)

    def test_half_overlap_hand_count(self):
        p, r, f = sentence_f1(spans((0, 2), (2, 5)), spans((0, 2), (3, 5)))
        assert (p, r, f) == (0.5, 0.5, 0.5)

    def test_both_empty_convention(self):
        assert sentence_f1(spans(), spans()) == (1.0, 1.0, 1.0)

    def test_one_side_empty(self):
        p, r, f = sentence_f1(spans(), spans((0, 2)))
        assert (p, r, f) == (0.0, 0.0, 0.0)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(StructuralError):
            sentence_f1(spans((0, 9)), spans((0, 2)), n=4)


class TestCorpusF1:
    def test_single_sentence_equals_its_f1(self):
        rec = EvalRecord("0", 5, spans((0, 2), (2, 5)), spans((0, 2), (3, 5))).score()
        report = corpus_f1([rec])
        assert report.corpus_f1 == rec.f1 == 0.5
        assert report.sentence_f1 == rec.f1

    def test_pooled_counts_vs_mean(self):
        # sentence A perfect (2 spans), sentence B no hits (2 spans)
        a = EvalRecord("a", 5, spans((0, 2), (2, 5)), spans((0, 2), (2, 5))).score()
        b = EvalRecord("b", 5, spans((0, 3), (3, 5)), spans((0, 2), (2, 5))).score()
        report = corpus_f1([a, b])
        assert report.sentence_f1 == pytest.approx(0.5)
        assert report.tp == 2 and report.fp == 2 and report.fn == 2
        assert report.corpus_f1 == pytest.approx(0.5)  # pooled P=R=0.5

    def test_duplication_invariance(self):
        recs = [
            EvalRecord("a", 4, spans((0, 2)), spans((0, 2), (1, 3))).score(),
            EvalRecord("b", 4, spans((1, 3)), spans((0, 2))).score(),
        ]
        once = corpus_f1(recs)
        twice = corpus_f1(recs + [EvalRecord(r.sent_id + "x", r.length, r.pred, r.gold).score()
                                  for r in recs])
        assert once.corpus_f1 == twice.corpus_f1
        assert once.sentence_f1 == twice.sentence_f1

    def test_order_invariance(self):
        recs = [
            EvalRecord("a", 4, spans((0, 2)), spans((0, 2))).score(),
            EvalRecord("b", 5, spans((0, 3)), spans((1, 4))).score(),
            EvalRecord("c", 6, spans(), spans()).score(),
        ]
        fwd = corpus_f1(recs)
        rev = corpus_f1(list(reversed(recs)))
        assert fwd.corpus_f1 == rev.corpus_f1 and fwd.sentence_f1 == rev.sentence_f1

    def test_empty_list_rejected(self):
        with pytest.raises(DataError):
            corpus_f1([])

    def test_binary_vs_binary_precision_equals_recall(self):
        # equal span counts force P = R = F1 per sentence
        pred = tree_to_spans(right_branching_tree(6))
        gold_tree_spans = spans((0, 3), (3, 6), (1, 3), (4, 6))
        rec = EvalRecord("0", 6, pred, gold_tree_spans).score()
        assert len(pred) == len(gold_tree_spans)
        assert rec.precision == rec.recall == rec.f1


class TestBranchingBaseline:
    def test_right_branching_four(self):
        assert branching_spans(4, "right").spans == {(1, 4), (2, 4)}

    def test_left_branching_four(self):
        assert branching_spans(4, "left").spans == {(0, 2), (0, 3)}

    def test_two_tokens_empty_either_way(self):
        assert branching_spans(2, "right").spans == set()
        assert branching_spans(2, "left").spans == set()

    def test_degenerate_length_rejected(self):
        with pytest.raises(DegenerateInputError):
            branching_spans(1, "right")

    def test_unknown_direction_rejected(self):
        with pytest.raises(DataError):
            branching_spans(4, "middle")


class TestPermBaseline:
    def test_singleton_groups_unchanged(self):
        preds = [(3, "t3"), (4, "t4"), (5, "t5")]
        assert perm_baseline(preds, rng_seed=0) == ["t3", "t4", "t5"]

    def test_multiset_preserved_per_group(self):
        preds = [(3, "a"), (3, "b"), (4, "x"), (3, "c"), (4, "y")]
        out = perm_baseline(preds, rng_seed=7)
        assert sorted([out[0], out[1], out[3]]) == ["a", "b", "c"]
        assert sorted([out[2], out[4]]) == ["x", "y"]

    def test_seeded_determinism(self):
        preds = [(4, k) for k in "abcdef"]
        a = perm_baseline(preds, rng_seed=3)
        b = perm_baseline(preds, rng_seed=3)
        c = perm_baseline(preds, rng_seed=4)
        assert a == b
        assert a != c  # different seed scrambles six items differently

    def test_identical_trees_leave_metrics_unchanged(self):
        gold = spans((1, 4), (2, 4))
        same = spans((1, 4), (2, 4))
        preds = [(4, same)] * 3
        shuffled = perm_baseline(preds, rng_seed=9)
        recs = [EvalRecord(str(k), 4, p, gold).score() for k, p in enumerate(shuffled)]
        assert corpus_f1(recs).sentence_f1 == 1.0
