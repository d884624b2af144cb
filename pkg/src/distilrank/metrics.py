"""Ranking metrics (MRR, NDCG@k, MAP) and paired two-tailed t-tests.

Semantics follow trec-eval: unjudged retrieved documents count as
non-relevant, NDCG uses the exponential gain 2^g - 1, and MAP divides by
the total number of judged-relevant documents, retrieved or not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class ContractError(ValueError):
    pass


class DegeneratePairsError(ValueError):
    """All paired differences are identical; no t-test p-value exists."""


class Qrels:
    """(query_id, doc_id) -> relevance grade."""

    def __init__(self, judgments: dict | None = None):
        self._j = {}
        if judgments:
            for (qid, docid), grade in judgments.items():
                self.add(qid, docid, grade)

    def add(self, qid: str, docid: str, grade: int):
        if grade < 0:
            raise ContractError(f"negative grade for ({qid}, {docid})")
        self._j[(qid, docid)] = int(grade)

    def grade(self, qid: str, docid: str) -> int:
        return self._j.get((qid, docid), 0)

    def grades_for(self, qid: str) -> list:
        return [g for (q, _), g in self._j.items() if q == qid]

    def judged_queries(self) -> set:
        return {q for q, _ in self._j}

    def num_relevant(self, qid: str) -> int:
        return sum(1 for (q, _), g in self._j.items() if q == qid and g > 0)

    def items(self):
        return self._j.items()

    def __len__(self):
        return len(self._j)

    def __eq__(self, other):
        return isinstance(other, Qrels) and self._j == other._j


@dataclass
class MetricResult:
    per_query: dict  # qid -> value
    mean: float
    unjudged_queries: int = 0


def _check_rankings(rankings: dict):
    for qid, docs in rankings.items():
        if len(set(docs)) != len(docs):
            raise ContractError(f"duplicate doc_id in ranking for query {qid}")


def mrr(rankings: dict, qrels: Qrels, cutoff: int | None = None) -> MetricResult:
    """Reciprocal rank of the first relevant document, 0 if none in cutoff."""
    _check_rankings(rankings)
    judged = qrels.judged_queries()
    per_query = {}
    unjudged = 0
    for qid, docs in rankings.items():
        if qid not in judged:
            unjudged += 1
        value = 0.0
        limit = len(docs) if cutoff is None else min(cutoff, len(docs))
        for i in range(limit):
            if qrels.grade(qid, docs[i]) > 0:
                value = 1.0 / (i + 1)
                break
        per_query[qid] = value
    n = len(per_query)
    return MetricResult(per_query, sum(per_query.values()) / n if n else 0.0,
                        unjudged)


def ndcg_at_k(rankings: dict, qrels: Qrels, k: int = 10) -> MetricResult:
    _check_rankings(rankings)
    judged = qrels.judged_queries()
    per_query = {}
    unjudged = 0
    for qid, docs in rankings.items():
        if qid not in judged:
            unjudged += 1
        dcg = 0.0
        for i, docid in enumerate(docs[:k]):
            g = qrels.grade(qid, docid)
            if g > 0:
                dcg += (2.0 ** g - 1.0) / math.log2(i + 2)
        ideal = sorted((g for g in qrels.grades_for(qid) if g > 0), reverse=True)
        idcg = sum(
            (2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(ideal[:k])
        )
        per_query[qid] = dcg / idcg if idcg > 0 else 0.0
    n = len(per_query)
    return MetricResult(per_query, sum(per_query.values()) / n if n else 0.0,
                        unjudged)


def map_metric(rankings: dict, qrels: Qrels) -> MetricResult:
    """Average precision per query, normalized by all judged-relevant docs."""
    _check_rankings(rankings)
    judged = qrels.judged_queries()
    per_query = {}
    unjudged = 0
    for qid, docs in rankings.items():
        if qid not in judged:
            unjudged += 1
        total_rel = qrels.num_relevant(qid)
        if total_rel == 0:
            per_query[qid] = 0.0
            continue
        hits = 0
        ap = 0.0
        for i, docid in enumerate(docs):
            if qrels.grade(qid, docid) > 0:
                hits += 1
                ap += hits / (i + 1)
        per_query[qid] = ap / total_rel
    n = len(per_query)
    return MetricResult(per_query, sum(per_query.values()) / n if n else 0.0,
                        unjudged)


# -- t distribution ---------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz)."""
    MAXIT, EPS, FPMIN = 200, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < FPMIN:
        d = FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < FPMIN:
            d = FPMIN
        c = 1.0 + aa / c
        if abs(c) < FPMIN:
            c = FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < EPS:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if x < 0.0 or x > 1.0:
        raise ContractError(f"x must lie in [0,1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    ln_bt = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(1.0 - x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


@dataclass
class TTestResult:
    t: float
    df: int
    p: float


def paired_t_test(a, b) -> TTestResult:
    """Two-tailed paired t-test on per-query scores.

    p comes from the t distribution via the regularized incomplete beta:
    p = I_{df/(df+t^2)}(df/2, 1/2).
    """
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise ContractError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ContractError("need at least 2 pairs")
    d = [x - y for x, y in zip(a, b)]
    mean = sum(d) / n
    var = sum((x - mean) ** 2 for x in d) / (n - 1)
    if var == 0.0:
        raise DegeneratePairsError("paired differences have zero variance")
    t = mean / math.sqrt(var / n)
    df = n - 1
    p = betainc(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(t=t, df=df, p=p)


# -- report -----------------------------------------------------------------


def significance_mark(p: float) -> str:
    """Strong mark below 0.01, weak in [0.01, 0.05), empty otherwise."""
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass
class MetricReport:
    metrics: dict                      # name -> MetricResult
    comparisons: dict = field(default_factory=dict)
    # comparisons[baseline_name][metric_name] -> {"p": float|None,
    #   "mark": str, "note": str}

    def add_baseline(self, name: str, baseline_metrics: dict):
        rows = {}
        for metric_name, result in self.metrics.items():
            base = baseline_metrics[metric_name]
            qids = sorted(result.per_query)
            if sorted(base.per_query) != qids:
                raise ContractError(
                    f"baseline {name} evaluates different queries"
                )
            ours = [result.per_query[q] for q in qids]
            theirs = [base.per_query[q] for q in qids]
            try:
                test = paired_t_test(ours, theirs)
                rows[metric_name] = {
                    "p": test.p,
                    "t": test.t,
                    "mark": significance_mark(test.p),
                    "note": "",
                }
            except DegeneratePairsError:
                rows[metric_name] = {
                    "p": None,
                    "t": None,
                    "mark": "",
                    "note": "degenerate pairs (identical per-query scores)",
                }
        self.comparisons[name] = rows

    def render(self) -> str:
        lines = ["metric\tmean\tqueries"]
        for name, result in self.metrics.items():
            lines.append(
                f"{name}\t{result.mean:.4f}\t{len(result.per_query)}"
            )
        for base, rows in self.comparisons.items():
            lines.append(f"# vs {base}")
            for metric_name, row in rows.items():
                if row["p"] is None:
                    lines.append(f"{metric_name}\tp=n/a\t{row['note']}")
                else:
                    lines.append(
                        f"{metric_name}\tp={row['p']:.4f}\t{row['mark']}"
                    )
        return "\n".join(lines) + "\n"


def evaluate_run(rankings: dict, qrels: Qrels, mrr_cutoff: int | None = None
                 ) -> MetricReport:
    """Standard metric battery over one run."""
    metrics = {
        "MRR": mrr(rankings, qrels, cutoff=mrr_cutoff),
        "MRR@10": mrr(rankings, qrels, cutoff=10),
        "NDCG@10": ndcg_at_k(rankings, qrels, k=10),
        "MAP": map_metric(rankings, qrels),
    }
    return MetricReport(metrics=metrics)
