"""Lookup-table inner-product search over coded databases, plus MAP/PR/P@N.

A query is never quantized: its embedding is dotted against every codeword
once, giving an M x K table, and each database item's score is the sum of M
table lookups - identical to dot(query, reconstruction). Ranking is by
descending score with ties broken by ascending database index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError
from .quantizer import CodebookSet, validate_codes


@dataclass
class RankedResult:
    """Top-R database positions with their scores, best first."""

    indices: np.ndarray
    scores: np.ndarray


@dataclass
class EvalReport:
    map_at_r: float
    r: int
    pr_curve: list[tuple[float, float]]
    p_at_n: list[tuple[int, float]]
    n_queries: int


def build_table(query_embedding: np.ndarray, codebooks: CodebookSet) -> np.ndarray:
    """Inner products of the query with every codeword; shape (M, K)."""
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != (codebooks.d,):
        raise ValueError(f"query must be a {codebooks.d}-vector")
    return np.einsum("d,mdk->mk", q, codebooks.codebooks)


def aqd_score(table: np.ndarray, code_row) -> float:
    """Score one database item from its code: sum of M table lookups."""
    code_row = np.asarray(code_row, dtype=np.int64)
    return float(table[np.arange(table.shape[0]), code_row].sum())


def score_all(table: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Scores for every row of an (N, M) code matrix."""
    return table[np.arange(table.shape[0])[None, :], codes].sum(axis=1)


def search(
    query_embedding: np.ndarray,
    codebooks: CodebookSet,
    codes: np.ndarray,
    top_r: int,
) -> RankedResult:
    """Exact top-R by table-lookup inner product; ties go to the lower index."""
    codes = validate_codes(codes, codebooks.m, codebooks.k)
    n = codes.shape[0]
    if not 1 <= top_r <= n:
        raise ValueError(f"top_r={top_r} out of range for {n} items")
    table = build_table(query_embedding, codebooks)
    scores = score_all(table, codes)
    order = np.argsort(-scores, kind="stable")[:top_r]
    return RankedResult(order, scores[order])


def _check_ranking(ranking) -> np.ndarray:
    ranking = np.asarray(ranking, dtype=np.int64)
    if ranking.ndim != 1:
        raise ValueError("ranking must be a 1-d index array")
    return ranking


def average_precision(ranking, relevant, r: int) -> float | None:
    """AP@r for one query; None when the query has no relevant items.

    AP@r = sum over relevant ranks k <= r of precision@k, divided by
    min(r, total relevant).
    """
    ranking = _check_ranking(ranking)
    relevant = np.asarray(relevant, dtype=bool)
    total = int(relevant.sum())
    if total == 0:
        return None
    rel_at = relevant[ranking[:r]]
    cum = np.cumsum(rel_at)
    ranks = np.arange(1, rel_at.size + 1)
    return float(np.sum(cum[rel_at] / ranks[rel_at]) / min(r, total))


def mean_average_precision(rankings, relevances, r: int) -> float:
    """Mean AP@r over queries that have at least one relevant item.

    Args:
        rankings: per-query arrays of database positions, best first.
        relevances: per-query boolean arrays over database positions.
        r: truncation rank, >= 1.

    Raises:
        EvaluationError: no query has any relevant item.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if len(rankings) != len(relevances):
        raise ValueError("rankings and relevances must align")
    values = []
    for ranking, relevant in zip(rankings, relevances):
        ap = average_precision(ranking, relevant, r)
        if ap is not None:
            values.append(ap)
    if not values:
        raise EvaluationError("no query has a relevant database item")
    return float(np.mean(values))


def precision_recall_curve(ranking, relevant) -> list[tuple[float, float]]:
    """One (recall, precision) point per rank position.

    Raises:
        EvaluationError: the query has no relevant items.
    """
    ranking = _check_ranking(ranking)
    relevant = np.asarray(relevant, dtype=bool)
    total = int(relevant.sum())
    if total == 0:
        raise EvaluationError("query has no relevant items")
    cum = np.cumsum(relevant[ranking])
    ranks = np.arange(1, ranking.size + 1)
    recall = cum / total
    precision = cum / ranks
    return list(zip(recall.tolist(), precision.tolist()))


def precision_at_n(ranking, relevant, n_list) -> list[tuple[int, float]]:
    """precision@n = relevant-in-top-n / n for each requested n."""
    ranking = _check_ranking(ranking)
    relevant = np.asarray(relevant, dtype=bool)
    cum = np.cumsum(relevant[ranking])
    out = []
    for n in n_list:
        if not 1 <= n <= ranking.size:
            raise ValueError(f"n={n} out of range for ranking of {ranking.size}")
        out.append((int(n), float(cum[n - 1] / n)))
    return out


def evaluate(
    query_embeddings: np.ndarray,
    codebooks: CodebookSet,
    codes: np.ndarray,
    relevances,
    r: int,
    n_list=None,
) -> EvalReport:
    """Full harness: rank every query, then MAP@r plus macro-averaged curves.

    PR and P@N points are averaged pointwise over queries at each rank;
    queries without relevant items are skipped for MAP and the PR average but
    still counted in n_queries.
    """
    queries = np.atleast_2d(np.asarray(query_embeddings, dtype=np.float64))
    n_db = codes.shape[0]
    if n_list is None:
        n_list = [n for n in (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000) if n <= n_db]
    rankings = [search(q, codebooks, codes, n_db).indices for q in queries]
    map_at_r = mean_average_precision(rankings, relevances, r)

    prec_sum = np.zeros(n_db)
    rec_sum = np.zeros(n_db)
    counted = 0
    for ranking, relevant in zip(rankings, relevances):
        relevant = np.asarray(relevant, dtype=bool)
        if not relevant.any():
            continue
        pts = precision_recall_curve(ranking, relevant)
        rec_sum += [p[0] for p in pts]
        prec_sum += [p[1] for p in pts]
        counted += 1
    pr_curve = list(zip((rec_sum / counted).tolist(), (prec_sum / counted).tolist()))

    pn_acc = np.zeros(len(n_list))
    for ranking, relevant in zip(rankings, relevances):
        pts = precision_at_n(ranking, relevant, n_list)
        pn_acc += [p[1] for p in pts]
    p_at_n = [(int(n), float(v / len(rankings))) for n, v in zip(n_list, pn_acc)]
    return EvalReport(map_at_r, r, pr_curve, p_at_n, len(rankings))


def save_report(path, report: EvalReport) -> None:
    doc = {
        "map": report.map_at_r,
        "r": report.r,
        "n_queries": report.n_queries,
        "pr_curve": [[rec, prec] for rec, prec in report.pr_curve],
        "p_at_n": [[n, prec] for n, prec in report.p_at_n],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
