"""Corpus-similarity and error analysis: factor inventories with type- and
instance-level overlap rates, success-to-failure error buckets, Spearman rank
correlation, and the paired t-test with the controlled-randomness training
protocol (same-seed pairing across conditions)."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError, DataError, DegenerateInputError, StructuralError

FACTORS = ("labels", "rules", "rules_lexical", "rules_non_lexical", "words")


@dataclass
class FactorInventory:
    """Counted phrasal labels, grammar rules (split lexical/non-lexical), and words."""

    label_counts: Counter = field(default_factory=Counter)
    lexical_rule_counts: Counter = field(default_factory=Counter)
    nonlexical_rule_counts: Counter = field(default_factory=Counter)
    word_counts: Counter = field(default_factory=Counter)

    def factor(self, name: str) -> Counter:
        if name == "labels":
            return self.label_counts
        if name == "words":
            return self.word_counts
        if name == "rules_lexical":
            return self.lexical_rule_counts
        if name == "rules_non_lexical":
            return self.nonlexical_rule_counts
        if name == "rules":
            merged = Counter()
            for key, c in self.lexical_rule_counts.items():
                merged[("lex",) + key] = c
            for key, c in self.nonlexical_rule_counts.items():
                merged[("nonlex",) + key] = c
            return merged
        raise ConfigError(f"unknown factor {name!r}")


def extract_factors(treebank, unk_vocab=None) -> FactorInventory:
    """Count every phrasal label, CFG rule, and token occurrence in gold trees.

    Phrasal labels come from non-preterminal internal nodes; preterminal
    nodes contribute lexical rules (POS -> word). With `unk_vocab` given,
    words outside it are counted as `<unk>` (lexical rules follow suit).
    """
    entries = list(treebank)
    if not entries:
        raise DataError("empty treebank")
    inv = FactorInventory()

    def map_word(w):
        if unk_vocab is not None and w not in unk_vocab:
            return "<unk>"
        return w

    def walk(node, sent_id):
        if node.is_leaf:
            raise DataError(f"sentence {sent_id}: bare leaf outside a preterminal")
        if node.is_preterminal:
            word = map_word(node.children[0].word)
            inv.lexical_rule_counts[(node.label, word)] += 1
            inv.word_counts[word] += 1
            return
        inv.label_counts[node.label] += 1
        inv.nonlexical_rule_counts[(node.label, tuple(c.label for c in node.children))] += 1
        for child in node.children:
            walk(child, sent_id)

    for entry in entries:
        walk(entry.tree, entry.sent_id)
    return inv


@dataclass
class OverlapReport:
    rates: dict  # factor -> (type_rate, instance_rate)

    def __getitem__(self, factor):
        return self.rates[factor]


def overlap_rates(train: FactorInventory, test: FactorInventory) -> OverlapReport:
    """Share of test types / test instances covered by the training inventory."""
    rates = {}
    for name in FACTORS:
        test_counter = test.factor(name)
        if not test_counter:
            raise DataError(f"test inventory has no {name}")
        train_keys = set(train.factor(name))
        covered_types = sum(1 for k in test_counter if k in train_keys)
        total_instances = sum(test_counter.values())
        covered_instances = sum(c for k, c in test_counter.items() if k in train_keys)
        rates[name] = (covered_types / len(test_counter), covered_instances / total_instances)
    return OverlapReport(rates)


# ---------------------------------------------------------------------------
# Error buckets

@dataclass
class ErrorBucketRow:
    bucket_start: int
    bucket_end: int  # exclusive
    unknown_count: int
    recognized: int
    unrecognized: int
    num_sentences: int

    @property
    def ratio(self) -> float:
        if self.unrecognized == 0:
            return math.inf
        return self.recognized / self.unrecognized


@dataclass
class ErrorBucketTable:
    bucket_width: int
    min_length: int
    rows: list

    def row(self, bucket_start, unknown_count):
        for r in self.rows:
            if r.bucket_start == bucket_start and r.unknown_count == unknown_count:
                return r
        return None


def error_buckets(records, bucket_width: int) -> ErrorBucketTable:
    """Tally recognized vs unrecognized gold spans per (length bucket, unk count).

    Buckets are consecutive length ranges of `bucket_width`, anchored at the
    corpus minimum length. Ratio uses an infinity sentinel when nothing was
    missed.
    """
    if bucket_width < 1:
        raise ConfigError(f"bucket_width must be >= 1, got {bucket_width}")
    records = list(records)
    if not records:
        raise DataError("no records")
    min_len = min(r.length for r in records)
    acc = {}
    for rec in records:
        b = (rec.length - min_len) // bucket_width
        key = (min_len + b * bucket_width, rec.unknown_count)
        rec_hits = len(rec.pred.spans & rec.gold.spans)
        missed = len(rec.gold.spans) - rec_hits
        got = acc.get(key)
        if got is None:
            acc[key] = [rec_hits, missed, 1]
        else:
            got[0] += rec_hits
            got[1] += missed
            got[2] += 1
    rows = [
        ErrorBucketRow(start, start + bucket_width, unk, hits, missed, cnt)
        for (start, unk), (hits, missed, cnt) in sorted(acc.items())
    ]
    return ErrorBucketTable(bucket_width, min_len, rows)


# ---------------------------------------------------------------------------
# Statistics. The Student-t CDF uses the regularized incomplete beta function
# evaluated by Lentz's continued fraction; accurate to ~1e-15, well inside
# the 1e-8 contract.

def _betacf(a: float, b: float, x: float) -> float:
    max_iter, eps, fpmin = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t_stat: float, df: int) -> float:
    """P(|T_df| >= |t|) for the Student-t distribution."""
    if df < 1:
        raise DegenerateInputError(f"degrees of freedom must be >= 1, got {df}")
    if math.isinf(t_stat):
        return 0.0
    x = df / (df + t_stat * t_stat)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def _average_ranks(xs):
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def ratio_length_correlation(table: ErrorBucketTable, unknown_count: int):
    """Spearman correlation of success-to-failure ratio against bucket length
    for a fixed unknown-token count; infinite-ratio rows are excluded."""
    rows = [r for r in table.rows
            if r.unknown_count == unknown_count and not math.isinf(r.ratio)]
    if len(rows) < 3:
        raise DegenerateInputError(
            f"need >= 3 finite-ratio buckets for unknown_count={unknown_count}, "
            f"found {len(rows)}"
        )
    lengths = [r.bucket_start for r in rows]
    ratios = [r.ratio for r in rows]
    return spearman(lengths, ratios)


def spearman(xs, ys):
    """Spearman's rho with average-rank ties; two-sided p via t-approximation."""
    xs, ys = list(xs), list(ys)
    if len(xs) != len(ys):
        raise StructuralError("series lengths differ")
    n = len(xs)
    if n < 3:
        raise DegenerateInputError(f"spearman needs n >= 3, got {n}")
    rx, ry = _average_ranks(xs), _average_ranks(ys)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    if vx == 0.0 or vy == 0.0:
        raise DegenerateInputError("constant series: correlation undefined")
    rho = cov / math.sqrt(vx * vy)
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, student_t_two_sided_p(t, n - 2)


def paired_t_test(a, b):
    """Two-sided paired t-test; returns (t, p, mean_diff, std_diff).

    Pairs by index (same seed across conditions); sample std uses the n-1
    denominator.
    """
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise StructuralError("paired series lengths differ")
    n = len(a)
    if n < 2:
        raise DegenerateInputError(f"paired test needs n >= 2, got {n}")
    d = [x - y for x, y in zip(a, b)]
    mean = sum(d) / n
    var = sum((x - mean) ** 2 for x in d) / (n - 1)
    if var == 0.0:
        raise DegenerateInputError("zero variance of paired differences")
    std = math.sqrt(var)
    t = mean / (std / math.sqrt(n))
    return t, student_t_two_sided_p(t, n - 1), mean, std


# ---------------------------------------------------------------------------
# Controlled-randomness protocol

CONDITIONS = ("RM", "RM+RD", "V-RM")


@dataclass
class RunRecord:
    condition: str
    seed_index: int
    model_seed: int
    data_seed: int
    s_f1: float
    init_digest: str = ""
    order_digest: str = ""


@dataclass
class ScoreTable:
    records: list

    def scores(self, condition: str):
        return [r.s_f1 for r in self.records if r.condition == condition]

    def paired(self, cond_a: str, cond_b: str):
        return paired_t_test(self.scores(cond_a), self.scores(cond_b))


def seed_experiment_protocol(train_fn, conditions, num_seeds: int,
                             base_model_seed: int = 0, base_data_seed: int = 1000) -> ScoreTable:
    """Run each condition `num_seeds` times with controlled randomness.

    `train_fn(model_seed, data_seed, grounded)` must return an object with
    s_f1, init_digest, order_digest attributes. Model-init seeds are shared
    across conditions per seed index; RM and V-RM keep one fixed data order
    while RM+RD redraws it per seed.
    """
    for cond in conditions:
        if cond not in CONDITIONS:
            raise ConfigError(f"unknown condition {cond!r}; choose from {CONDITIONS}")
    if num_seeds < 1:
        raise ConfigError("num_seeds must be >= 1")
    records = []
    for s in range(num_seeds):
        model_seed = base_model_seed + s
        for cond in conditions:
            grounded = cond == "V-RM"
            data_seed = base_data_seed + 1 + s if cond == "RM+RD" else base_data_seed
            result = train_fn(model_seed, data_seed, grounded)
            records.append(
                RunRecord(cond, s, model_seed, data_seed, result.s_f1,
                          getattr(result, "init_digest", ""),
                          getattr(result, "order_digest", ""))
            )
    return ScoreTable(records)


# ---------------------------------------------------------------------------
# CSV emission (fixed column order, no timestamps: reruns are byte-identical)

def overlap_report_to_csv(report: OverlapReport) -> str:
    lines = ["factor,level,rate"]
    for factor in FACTORS:
        t, i = report.rates[factor]
        lines.append(f"{factor},type,{t:.6f}")
        lines.append(f"{factor},instance,{i:.6f}")
    return "\n".join(lines) + "\n"


def error_buckets_to_csv(table: ErrorBucketTable) -> str:
    lines = ["bucket_start,bucket_end,unknown_count,recognized,unrecognized,ratio,num_sentences"]
    for r in table.rows:
        ratio = "inf" if math.isinf(r.ratio) else f"{r.ratio:.6f}"
        lines.append(
            f"{r.bucket_start},{r.bucket_end},{r.unknown_count},"
            f"{r.recognized},{r.unrecognized},{ratio},{r.num_sentences}"
        )
    return "\n".join(lines) + "\n"


def score_table_to_csv(table: ScoreTable) -> str:
    lines = ["condition,seed_index,model_seed,data_seed,s_f1,init_digest,order_digest"]
    for r in table.records:
        lines.append(
            f"{r.condition},{r.seed_index},{r.model_seed},{r.data_seed},"
            f"{r.s_f1:.6f},{r.init_digest},{r.order_digest}"
        )
    return "\n".join(lines) + "\n"
