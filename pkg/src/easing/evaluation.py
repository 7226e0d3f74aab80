"""Random-walk baselines and the evaluation metric suite.

PageRank runs power iteration on the file edges only (injected self edges
are excluded from the transition structure); parallel typed edges count with
their multiplicity in the out-degree.  Dangling mass is redistributed to the
teleport distribution, which is uniform for plain PageRank.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .graph import HetGraph


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, last_delta: float):
        super().__init__(message)
        self.last_delta = last_delta


class MetricError(ValueError):
    pass


def _transition_arrays(graph: HetGraph):
    keep = graph.file_edge_mask()
    src, dst = graph.src[keep], graph.dst[keep]
    out_deg = np.zeros(graph.node_count)
    np.add.at(out_deg, src, 1.0)
    return src, dst, out_deg


def pagerank(graph: HetGraph, damping: float = 0.85, tol: float = 1e-10,
             max_iter: int = 1000) -> np.ndarray:
    """Uniform-teleport PageRank; scores sum to 1."""
    restart = np.full(graph.node_count, 1.0 / graph.node_count)
    return personalized_pagerank(graph, damping, restart, tol, max_iter)


def personalized_pagerank(graph: HetGraph, damping: float,
                          restart: np.ndarray, tol: float = 1e-10,
                          max_iter: int = 1000) -> np.ndarray:
    """PageRank with teleport (and dangling mass) sent to ``restart``."""
    if not 0.0 < damping < 1.0:
        raise MetricError(f"damping must be in (0, 1), got {damping}")
    restart = np.asarray(restart, dtype=np.float64)
    if restart.shape != (graph.node_count,):
        raise MetricError("restart distribution length must equal node count")
    if (restart < 0).any() or abs(restart.sum() - 1.0) > 1e-9:
        raise MetricError("restart must be a probability distribution")
    src, dst, out_deg = _transition_arrays(graph)
    dangling = out_deg == 0.0
    safe_deg = np.where(dangling, 1.0, out_deg)
    v = np.full(graph.node_count, 1.0 / graph.node_count)
    for _ in range(max_iter):
        spread = np.zeros(graph.node_count)
        np.add.at(spread, dst, v[src] / safe_deg[src])
        spread += v[dangling].sum() * restart
        new_v = damping * spread + (1.0 - damping) * restart
        delta = np.abs(new_v - v).sum()
        v = new_v
        if delta < tol:
            return v
    raise ConvergenceError(
        f"power iteration did not reach {tol} in {max_iter} iterations "
        f"(last delta {delta:.3e})", float(delta))


def restart_from_labels(node_count: int, labeled) -> np.ndarray:
    """Teleport distribution proportional to labeled training values.

    Negative values carry no restart mass; if nothing positive remains the
    distribution falls back to uniform.
    """
    restart = np.zeros(node_count)
    for node, value in labeled:
        restart[node] = max(value, 0.0)
    total = restart.sum()
    if total <= 0.0:
        return np.full(node_count, 1.0 / node_count)
    return restart / total


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def regression_metrics(pred, truth):
    """(MAE, RMSE, NRMSE); NRMSE normalizes by the ground-truth range."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1 or pred.size == 0:
        raise MetricError("pred/truth must be equal-length non-empty vectors")
    resid = pred - truth
    mae = float(np.abs(resid).mean())
    rmse = float(np.sqrt((resid ** 2).mean()))
    value_range = float(truth.max() - truth.min())
    if value_range == 0.0:
        raise MetricError("NRMSE undefined: constant truth vector")
    return mae, rmse, rmse / value_range


def _average_ranks(v: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing their average rank."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(pred, truth) -> float:
    """Pearson correlation of average-tie ranks."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size < 2:
        raise MetricError("spearman needs two aligned vectors of length >= 2")
    rp, rt = _average_ranks(pred), _average_ranks(truth)
    sp, st = rp.std(), rt.std()
    if sp == 0.0 or st == 0.0:
        raise MetricError("spearman undefined: zero rank variance")
    return float(((rp - rp.mean()) * (rt - rt.mean())).mean() / (sp * st))


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken by ascending index."""
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order[:k]


def precision_at_k(pred, truth, k: int) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if k <= 0:
        raise MetricError("k must be positive")
    if k > pred.size or pred.shape != truth.shape:
        raise MetricError("k exceeds vector length or shapes differ")
    hit = np.intersect1d(_top_k(pred, k), _top_k(truth, k))
    return float(hit.size) / k


def ndcg_at_k(pred, truth, k: int) -> float:
    """NDCG with gain = raw truth value and 1/log2(rank+1) discount."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if k <= 0:
        raise MetricError("k must be positive")
    if k > pred.size or pred.shape != truth.shape:
        raise MetricError("k exceeds vector length or shapes differ")
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(truth[_top_k(pred, k)] @ discounts)
    idcg = float(truth[_top_k(truth, k)] @ discounts)
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    rmse: float
    nrmse: float
    spearman: float
    precision_at_k: float
    ndcg_at_k: float
    k: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)


def compute_report(pred, truth, k: int) -> MetricsReport:
    """Full metric suite over aligned score vectors (callers pass vectors
    ordered by ascending node id so the @k tie-break is reproducible)."""
    k = min(k, len(np.asarray(pred)))
    mae, rmse, nrmse = regression_metrics(pred, truth)
    return MetricsReport(
        mae=mae, rmse=rmse, nrmse=nrmse,
        spearman=spearman(pred, truth),
        precision_at_k=precision_at_k(pred, truth, k),
        ndcg_at_k=ndcg_at_k(pred, truth, k),
        k=k,
    )
