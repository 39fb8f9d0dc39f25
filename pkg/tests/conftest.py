import math

import pytest
import torch

from pcfgkit.grammar import NEG_INF, GrammarShape, RuleTable

F64 = torch.float64


@pytest.fixture
def one_parse_table():
    """N=1, P=1: p(S->A)=1, p(A->TT)=1, p(T->w)=0.5 for each of 2 words."""
    start = torch.tensor([0.0], dtype=F64)
    binary = torch.full((1, 2, 2), NEG_INF, dtype=F64)
    binary[0, 1, 1] = 0.0
    preterm = torch.full((1, 2), math.log(0.5), dtype=F64)
    return RuleTable(start, binary, preterm)


def random_table(num_nt, num_pt, vocab, seed, concentration=1.0):
    return RuleTable.random_normalized(
        GrammarShape(num_nt, num_pt, vocab), seed=seed, concentration=concentration
    )
