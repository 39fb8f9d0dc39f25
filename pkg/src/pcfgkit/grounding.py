"""Image-sentence matching over posterior-weighted spans, and the hinge loss.

The matching score of an image and a sentence is the sum, over all width>=2
spans, of the posterior probability that the span is a constituent times the
cosine similarity between the image vector and the span representation
(mean-pooled word vectors through a shared linear projection). Because the
score is an expectation under the tree posterior, optimizing it pushes
gradient into the parser. The batch hinge loss penalizes un-aligned pairs in
both directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .chart import PosteriorTable
from .errors import ConfigError, DataError, StructuralError

_DTYPE = torch.float64
_NORM_FLOOR = 1e-12


@dataclass
class GroundingConfig:
    margin: float = 0.2
    d_img: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError(f"hinge margin must be positive, got {self.margin}")


@dataclass
class ImageVector:
    values: np.ndarray
    id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.isfinite(self.values).all():
            raise StructuralError(f"non-finite image vector for id {self.id!r}")


@dataclass
class SpanReps:
    """Projected representations for an ordered list of spans."""

    cells: list  # [(i, j)] in fill order
    reps: torch.Tensor  # [len(cells), d_img]


def span_representation(word_vectors, span, proj_weight, proj_bias) -> torch.Tensor:
    """Mean of the token vectors in [i, j), through the shared projection."""
    i, j = span
    word_vectors = torch.as_tensor(word_vectors, dtype=_DTYPE)
    if not (0 <= i < j <= word_vectors.shape[0]):
        raise StructuralError(f"empty or out-of-range span ({i}, {j})")
    mean = word_vectors[i:j].mean(dim=0)
    return mean @ torch.as_tensor(proj_weight, dtype=_DTYPE) + torch.as_tensor(
        proj_bias, dtype=_DTYPE
    )


def all_span_representations(word_vectors, proj_weight, proj_bias) -> SpanReps:
    """Representations of every width>=2 span, via cumulative sums."""
    word_vectors = torch.as_tensor(word_vectors, dtype=_DTYPE)
    n = word_vectors.shape[0]
    csum = torch.cat([torch.zeros(1, word_vectors.shape[1], dtype=_DTYPE),
                      torch.cumsum(word_vectors, dim=0)])
    cells, means = [], []
    for w in range(2, n + 1):
        for i in range(0, n - w + 1):
            cells.append((i, i + w))
            means.append((csum[i + w] - csum[i]) / w)
    reps = torch.stack(means) @ proj_weight + proj_bias
    return SpanReps(cells, reps)


def cosine_matrix(images: torch.Tensor, reps: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine; zero-norm vectors get similarity 0 on their rows."""
    dots = images @ reps.T
    ni = images.norm(dim=-1).clamp_min(_NORM_FLOOR)
    nr = reps.norm(dim=-1).clamp_min(_NORM_FLOOR)
    return dots / (ni[:, None] * nr[None, :])


def expected_match_score(image, posteriors: PosteriorTable, span_reps: SpanReps) -> float:
    """s(v, w): posterior-weighted cosine sum; lies in [-(n-1), n-1]."""
    image_t = torch.as_tensor(
        image.values if isinstance(image, ImageVector) else image, dtype=_DTYPE
    )
    weights = torch.stack([posteriors.span_post[i, j] for i, j in span_reps.cells])
    cos = cosine_matrix(image_t.unsqueeze(0), span_reps.reps)[0]
    return float((weights * cos).sum())


def pairwise_match_scores(images: torch.Tensor, posts, reps, cells) -> torch.Tensor:
    """score[i, j] = s(image_i, sentence_j), differentiable; [B, B]."""
    bsz = images.shape[0]
    cols = []
    for j in range(bsz):
        w = torch.stack([posts[j][i, k] for i, k in cells[j]])
        cos = cosine_matrix(images, reps[j])  # [B, M_j]
        cols.append(cos @ w)
    return torch.stack(cols, dim=1)


def hinge_loss_t(score_matrix: torch.Tensor, margin: float) -> torch.Tensor:
    """Symmetric in-batch hinge, averaged by batch size (torch, differentiable)."""
    if score_matrix.dim() != 2 or score_matrix.shape[0] != score_matrix.shape[1]:
        raise StructuralError(f"score matrix must be square, got {tuple(score_matrix.shape)}")
    bsz = score_matrix.shape[0]
    diag = score_matrix.diagonal()
    # rows: image i against captions; columns: caption j against images
    cost_row = (margin - diag[:, None] + score_matrix).clamp_min(0.0)
    cost_col = (margin - diag[None, :] + score_matrix).clamp_min(0.0)
    off = 1.0 - torch.eye(bsz, dtype=score_matrix.dtype)
    return ((cost_row + cost_col) * off).sum() / bsz


def hinge_loss(score_matrix, margin: float) -> float:
    return float(hinge_loss_t(torch.as_tensor(score_matrix, dtype=_DTYPE), margin))


# ---------------------------------------------------------------------------
# File ingestion: one `id<TAB>float,float,...` line per image

def load_image_vectors(path) -> dict:
    vectors = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            try:
                key, payload = line.split("\t", 1)
            except ValueError:
                raise DataError(f"{path}:{lineno}: expected id<TAB>values")
            try:
                values = np.array([float(x) for x in payload.split(",")], dtype=float)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad float ({exc})")
            if dim is None:
                dim = values.shape[0]
            elif values.shape[0] != dim:
                raise DataError(
                    f"{path}:{lineno}: dimension {values.shape[0]} != {dim} from first line"
                )
            if key in vectors:
                raise DataError(f"{path}:{lineno}: duplicate image id {key!r}")
            vectors[key] = values
    if not vectors:
        raise DataError(f"{path}: no image vectors found")
    return vectors


def write_image_vectors(path, vectors: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for key in vectors:
            payload = ",".join(repr(float(x)) for x in np.asarray(vectors[key]).ravel())
            fh.write(f"{key}\t{payload}\n")
