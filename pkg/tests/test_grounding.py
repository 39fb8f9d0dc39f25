import math

import numpy as np
import pytest
import torch

from pcfgkit.chart import PosteriorTable
from pcfgkit.errors import ConfigError, DataError, StructuralError
from pcfgkit.grounding import (GroundingConfig, ImageVector, SpanReps,
                               all_span_representations, cosine_matrix,
                               expected_match_score, hinge_loss, load_image_vectors,
                               span_representation, write_image_vectors)

F64 = torch.float64


def posterior(n, entries):
    post = torch.zeros((n + 1, n + 1), dtype=F64)
    for (i, j), p in entries.items():
        post[i, j] = p
    return PosteriorTable(post, n)


class TestSpanRepresentation:
    def setup_method(self):
        gen = torch.Generator().manual_seed(0)
        self.vecs = torch.randn(4, 3, generator=gen, dtype=F64)
        self.w = torch.randn(3, 2, generator=gen, dtype=F64)
        self.b = torch.randn(2, generator=gen, dtype=F64)

    def test_identical_tokens_reduce_to_projection(self):
        vecs = self.vecs[0].repeat(3, 1)
        rep = span_representation(vecs, (0, 3), self.w, self.b)
        assert torch.allclose(rep, self.vecs[0] @ self.w + self.b, atol=1e-12)

    def test_width_one_span(self):
        rep = span_representation(self.vecs, (2, 3), self.w, self.b)
        assert torch.allclose(rep, self.vecs[2] @ self.w + self.b, atol=1e-12)

    def test_matches_hand_mean_affine(self):
        rep = span_representation(self.vecs, (1, 4), self.w, self.b)
        want = self.vecs[1:4].mean(dim=0) @ self.w + self.b
        assert torch.allclose(rep, want, atol=1e-9)

    def test_empty_span_rejected(self):
        with pytest.raises(StructuralError):
            span_representation(self.vecs, (2, 2), self.w, self.b)

    def test_all_spans_enumerates_width_two_plus(self):
        sp = all_span_representations(self.vecs, self.w, self.b)
        assert sp.cells == [(0, 2), (1, 3), (2, 4), (0, 3), (1, 4), (0, 4)]
        for (i, j), rep in zip(sp.cells, sp.reps):
            want = span_representation(self.vecs, (i, j), self.w, self.b)
            assert torch.allclose(rep, want, atol=1e-12)


class TestExpectedMatchScore:
    def test_aligned_reps_attain_upper_bound(self):
        n = 3
        post = posterior(n, {(0, 3): 1.0, (0, 2): 0.4, (1, 3): 0.6})
        v = torch.tensor([1.0, 2.0], dtype=F64)
        reps = SpanReps([(0, 2), (1, 3), (0, 3)], v.repeat(3, 1))
        score = expected_match_score(v, post, reps)
        assert abs(score - (n - 1)) < 1e-9  # posterior mass n-1 times cosine 1

    def test_orthogonal_image_scores_zero(self):
        post = posterior(2, {(0, 2): 1.0})
        reps = SpanReps([(0, 2)], torch.tensor([[1.0, 0.0]], dtype=F64))
        assert expected_match_score(torch.tensor([0.0, 1.0], dtype=F64), post, reps) == 0.0

    def test_hand_computed_two_parse_fixture(self):
        post = posterior(3, {(0, 3): 1.0, (0, 2): 0.6, (1, 3): 0.4})
        r02 = torch.tensor([1.0, 1.0], dtype=F64)
        r13 = torch.tensor([-1.0, 0.5], dtype=F64)
        r03 = torch.tensor([0.0, 2.0], dtype=F64)
        v = torch.tensor([3.0, 4.0], dtype=F64)
        reps = SpanReps([(0, 2), (1, 3), (0, 3)], torch.stack([r02, r13, r03]))
        def cos(a, b):
            return float(a @ b / (a.norm() * b.norm()))
        want = 0.6 * cos(v, r02) + 0.4 * cos(v, r13) + 1.0 * cos(v, r03)
        got = expected_match_score(v, post, reps)
        assert abs(got - want) < 1e-12

    def test_linear_in_posteriors(self):
        gen = torch.Generator().manual_seed(1)
        cells = [(0, 2), (1, 3), (0, 3)]
        reps = SpanReps(cells, torch.randn(3, 4, generator=gen, dtype=F64))
        v = torch.randn(4, generator=gen, dtype=F64)
        pa = posterior(3, {(0, 3): 1.0, (0, 2): 0.3, (1, 3): 0.7})
        pb = posterior(3, {(0, 3): 0.5, (0, 2): 0.1, (1, 3): 0.2})
        mix = PosteriorTable(0.25 * pa.span_post + 0.75 * pb.span_post, 3)
        want = 0.25 * expected_match_score(v, pa, reps) + 0.75 * expected_match_score(v, pb, reps)
        assert abs(expected_match_score(v, mix, reps) - want) < 1e-12

    def test_image_scale_invariance(self):
        gen = torch.Generator().manual_seed(2)
        reps = SpanReps([(0, 2), (0, 3), (1, 3)], torch.randn(3, 5, generator=gen, dtype=F64))
        post = posterior(3, {(0, 3): 1.0, (0, 2): 0.5, (1, 3): 0.5})
        v = torch.randn(5, generator=gen, dtype=F64)
        a = expected_match_score(v, post, reps)
        b = expected_match_score(17.3 * v, post, reps)
        assert abs(a - b) < 1e-12

    def test_zero_norm_treated_as_similarity_zero(self):
        post = posterior(2, {(0, 2): 1.0})
        reps = SpanReps([(0, 2)], torch.zeros(1, 3, dtype=F64))
        assert expected_match_score(torch.tensor([1.0, 0, 0], dtype=F64), post, reps) == 0.0


class TestHingeLoss:
    def test_satisfied_margin_gives_zero(self):
        scores = torch.eye(3, dtype=F64)  # diag 1.0, off-diag 0.0
        assert hinge_loss(scores, margin=0.5) == 0.0

    def test_all_equal_scores(self):
        for bsz in (2, 3, 5):
            scores = torch.full((bsz, bsz), 0.37, dtype=F64)
            m = 0.25
            assert abs(hinge_loss(scores, m) - 2 * m * (bsz - 1)) < 1e-12

    def test_two_by_two_hand_sum(self):
        scores = torch.tensor([[0.9, 0.4], [0.7, 0.8]], dtype=F64)
        # (i=0,j=1): max(0,.2-.9+.4)=0, max(0,.2-.8+.4)=0
        # (i=1,j=0): max(0,.2-.8+.7)=.1, max(0,.2-.9+.7)=0
        assert abs(hinge_loss(scores, margin=0.2) - 0.05) < 1e-12

    def test_nonnegative_always(self):
        gen = torch.Generator().manual_seed(3)
        for _ in range(20):
            scores = torch.randn(4, 4, generator=gen, dtype=F64)
            assert hinge_loss(scores, margin=0.1) >= 0.0

    def test_non_square_rejected(self):
        with pytest.raises(StructuralError):
            hinge_loss(torch.zeros(2, 3, dtype=F64), 0.2)


class TestConfigAndIO:
    def test_margin_must_be_positive(self):
        with pytest.raises(ConfigError):
            GroundingConfig(margin=0.0)

    def test_image_vector_must_be_finite(self):
        with pytest.raises(StructuralError):
            ImageVector(np.array([1.0, float("inf")]), "a")

    def test_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        vectors = {f"img{k}": rng.normal(size=5) for k in range(20)}
        path = tmp_path / "vecs.tsv"
        write_image_vectors(path, vectors)
        loaded = load_image_vectors(path)
        assert set(loaded) == set(vectors)
        for key in vectors:
            assert np.array_equal(loaded[key], vectors[key])

    def test_dimension_mismatch_reports_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a\t1.0,2.0\nb\t1.0,2.0,3.0\n")
        with pytest.raises(DataError, match="2"):
            load_image_vectors(path)

    def test_missing_tab_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a 1.0,2.0\n")
        with pytest.raises(DataError):
            load_image_vectors(path)


class TestCosine:
    def test_zero_rows_give_zero_similarity(self):
        images = torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=F64)
        reps = torch.tensor([[1.0, 1.0]], dtype=F64)
        sims = cosine_matrix(images, reps)
        assert sims[0, 0] == 0.0
        assert abs(sims[1, 0] - 1 / math.sqrt(2)) < 1e-12
