"""Evaluation metrics: pointwise accuracy and structural fidelity.

Pointwise: per-gene Pearson correlation across spots (PCC) and elementwise
MSE. Structural: GSC compares upper triangles of the predicted and true
gene-gene correlation matrices; SSC compares per-gene Moran's I vectors
over a symmetric k-NN spatial graph; DEG overlap compares top-K
differentially expressed genes per spatial domain under a one-vs-rest
rank-sum test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np
from scipy.stats import norm as _norm
from scipy.stats import rankdata

from .errors import ContractError, UndefinedMetricError
from .spatial_graph import SpatialWeightGraph, build_knn_graph
from .validation import check_array, same_shape

CORR_EPS = 1e-8
EXACT_MAX_GROUP = 8        # below this per-group size the rank-sum null is enumerated
EXACT_MAX_COMBOS = 200_000

REPORT_MAGIC = "flaglab-metrics v1"


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a @ a) * (b @ b))
    if denom == 0:
        raise UndefinedMetricError("Pearson correlation undefined for zero-variance input")
    return float((a @ b) / denom)


def pcc_mse(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Mean per-gene Pearson across spots, elementwise MSE, per-gene vector.

    Genes with zero variance on either side are NaN in the per-gene vector
    and excluded from the mean rather than silently imputed.
    """
    pred = check_array(pred, "pred", ndim=2)
    gt = check_array(gt, "gt", ndim=2)
    same_shape(pred, gt, "pred", "gt")
    if pred.shape[0] < 2:
        raise ContractError("PCC needs at least 2 spots")
    per_gene = np.full(pred.shape[1], np.nan)
    for g in range(pred.shape[1]):
        try:
            per_gene[g] = _pearson(pred[:, g], gt[:, g])
        except UndefinedMetricError:
            pass
    defined = np.isfinite(per_gene)
    if not defined.any():
        raise UndefinedMetricError("all genes have zero variance; PCC undefined")
    mse = float(((pred - gt) ** 2).mean())
    return float(per_gene[defined].mean()), mse, per_gene


def gene_corr_matrix(x: np.ndarray, eps: float = CORR_EPS) -> np.ndarray:
    """Gene-gene correlation C = X~^T X~ / (N-1) with eps-guarded columns.

    Zero-variance genes produce zero rows/columns instead of NaN.
    """
    x = check_array(x, "x", ndim=2)
    n = x.shape[0]
    if n < 2:
        raise ContractError("gene correlation needs N >= 2 spots")
    mu = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    xt = (x - mu) / (sd + eps)
    return (xt.T @ xt) / (n - 1)


def gsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Pearson correlation of the off-diagonal upper triangles of the two
    gene-gene correlation matrices."""
    pred = check_array(pred, "pred", ndim=2)
    gt = check_array(gt, "gt", ndim=2)
    same_shape(pred, gt, "pred", "gt")
    g = pred.shape[1]
    if g < 3:
        raise ContractError(f"GSC needs G >= 3 genes (got {g}); a single pair has no spread")
    iu = np.triu_indices(g, k=1)
    return _pearson(gene_corr_matrix(pred)[iu], gene_corr_matrix(gt)[iu])


def morans_i(x: np.ndarray, graph: SpatialWeightGraph | np.ndarray) -> float:
    """Global Moran's I: (N / S0) * (z^T W z) / (z^T z) with z = x - mean(x)."""
    x = check_array(np.asarray(x, dtype=np.float64).ravel(), "x", ndim=1)
    w = graph.W if isinstance(graph, SpatialWeightGraph) else np.asarray(graph)
    n = x.shape[0]
    if w.shape != (n, n):
        raise ContractError(f"weight matrix shape {w.shape} does not match N={n}")
    s0 = float(w.sum())
    if s0 <= 0:
        raise ContractError("spatial weights sum to zero")
    z = x - x.mean()
    zz = float(z @ z)
    if zz == 0:
        raise UndefinedMetricError("Moran's I undefined for constant input")
    return float((n / s0) * (z @ w @ z) / zz)


def morans_i_per_gene(expr: np.ndarray, graph: SpatialWeightGraph) -> np.ndarray:
    out = np.full(expr.shape[1], np.nan)
    for g in range(expr.shape[1]):
        try:
            out[g] = morans_i(expr[:, g], graph)
        except UndefinedMetricError:
            pass
    return out


def ssc(pred: np.ndarray, gt: np.ndarray, coords: np.ndarray, k: int = 8) -> float:
    """Pearson correlation between per-gene Moran's I vectors of pred and gt.

    Genes whose Moran's I is undefined on either side are dropped pairwise;
    at least 3 genes must survive.
    """
    pred = check_array(pred, "pred", ndim=2)
    gt = check_array(gt, "gt", ndim=2)
    same_shape(pred, gt, "pred", "gt")
    graph = build_knn_graph(coords, k)
    i_pred = morans_i_per_gene(pred, graph)
    i_gt = morans_i_per_gene(gt, graph)
    keep = np.isfinite(i_pred) & np.isfinite(i_gt)
    if keep.sum() < 3:
        raise ContractError(
            f"SSC needs >= 3 genes with defined Moran's I, got {int(keep.sum())}"
        )
    return _pearson(i_pred[keep], i_gt[keep])


# ---------------------------------------------------------------------------
# rank-sum DEG machinery

def rank_sum_test(in_values: np.ndarray, out_values: np.ndarray) -> tuple[float, float]:
    """One-sided (greater) Wilcoxon rank-sum; returns (U, p).

    Small groups get the exact null by enumeration over rank subsets (ties
    included via midranks); otherwise the normal approximation with tie
    correction. Enumeration is capped to keep worst cases bounded.
    """
    x = np.asarray(in_values, dtype=np.float64)
    y = np.asarray(out_values, dtype=np.float64)
    n1, n2 = len(x), len(y)
    if n1 < 1 or n2 < 1:
        raise ContractError("rank-sum test needs nonempty groups")
    pooled = np.concatenate([x, y])
    ranks = rankdata(pooled)
    r1 = float(ranks[:n1].sum())
    u = r1 - n1 * (n1 + 1) / 2.0
    n = n1 + n2
    small = min(n1, n2) < EXACT_MAX_GROUP
    if small and comb(n, min(n1, n2)) <= EXACT_MAX_COMBOS:
        k = min(n1, n2)
        total = comb(n, k)
        if k == n1:
            count = sum(1 for idx in combinations(range(n), k)
                        if ranks[list(idx)].sum() >= r1 - 1e-9)
            p = count / total
        else:
            # enumerate the smaller (out) group; in-group sum >= r1 iff
            # out-group sum <= total_ranks - r1
            r2_obs = ranks.sum() - r1
            count = sum(1 for idx in combinations(range(n), k)
                        if ranks[list(idx)].sum() <= r2_obs + 1e-9)
            p = count / total
        return u, float(p)
    mu = n1 * n2 / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts).sum()) / (n * (n - 1)))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 0.5
    z = (u - mu) / np.sqrt(var)
    return u, float(_norm.sf(z))


def _deg_ranking(expr: np.ndarray, mask: np.ndarray) -> list[int]:
    keys = []
    for g in range(expr.shape[1]):
        u, p = rank_sum_test(expr[mask, g], expr[~mask, g])
        keys.append((p, -u, g))
    return [g for _, _, g in sorted(keys)]


def deg_overlap(pred: np.ndarray, gt: np.ndarray, domain_labels: np.ndarray,
                top_k: int) -> float:
    """Mean over domains of |topK(gt) intersect topK(pred)| / K.

    Genes are ranked per domain by the one-vs-rest rank-sum test (ascending
    one-sided p, ties by descending U then gene index).
    """
    pred = check_array(pred, "pred", ndim=2)
    gt = check_array(gt, "gt", ndim=2)
    same_shape(pred, gt, "pred", "gt")
    labels = np.asarray(domain_labels).ravel()
    if labels.shape[0] != pred.shape[0]:
        raise ContractError("domain_labels length must match the number of spots")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise ContractError("DEG overlap needs >= 2 domains with >= 2 spots each")
    if not (1 <= top_k <= pred.shape[1]):
        raise ContractError(f"top_k must be in [1, {pred.shape[1]}], got {top_k}")
    ratios = []
    for label in uniq:
        mask = labels == label
        top_gt = set(_deg_ranking(gt, mask)[:top_k])
        top_pred = set(_deg_ranking(pred, mask)[:top_k])
        ratios.append(len(top_gt & top_pred) / top_k)
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# report

@dataclass
class MetricsReport:
    pcc: float
    mse: float
    gsc: float
    ssc: float
    per_gene_pcc: np.ndarray
    morans_gt: np.ndarray
    morans_pred: np.ndarray
    deg_overlap: dict[int, float] = field(default_factory=dict)
    n_excluded_genes: int = 0

    def to_text(self) -> str:
        lines = [
            REPORT_MAGIC,
            f"pcc: {self.pcc!r}",
            f"mse: {self.mse!r}",
            f"gsc: {self.gsc!r}",
            f"ssc: {self.ssc!r}",
            f"n_excluded_genes: {self.n_excluded_genes}",
            f"deg_overlap: {json.dumps({str(k): v for k, v in self.deg_overlap.items()})}",
            f"per_gene_pcc: {json.dumps([repr(float(v)) for v in self.per_gene_pcc])}",
            f"morans_gt: {json.dumps([repr(float(v)) for v in self.morans_gt])}",
            f"morans_pred: {json.dumps([repr(float(v)) for v in self.morans_pred])}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != REPORT_MAGIC:
            raise ContractError("not a metrics report")
        fields = dict(ln.split(": ", 1) for ln in lines[1:])
        vec = lambda key: np.array([float(v) for v in json.loads(fields[key])])
        return cls(
            pcc=float(fields["pcc"]), mse=float(fields["mse"]),
            gsc=float(fields["gsc"]), ssc=float(fields["ssc"]),
            per_gene_pcc=vec("per_gene_pcc"),
            morans_gt=vec("morans_gt"), morans_pred=vec("morans_pred"),
            deg_overlap={int(k): float(v)
                         for k, v in json.loads(fields["deg_overlap"]).items()},
            n_excluded_genes=int(fields["n_excluded_genes"]),
        )


def evaluate(pred: np.ndarray, gt: np.ndarray, coords: np.ndarray, k: int = 8,
             domain_labels: np.ndarray | None = None,
             deg_top_ks: tuple[int, ...] = (20, 50)) -> MetricsReport:
    """All metrics for one slide; DEG overlap only when domain labels exist."""
    pcc, mse, per_gene = pcc_mse(pred, gt)
    graph = build_knn_graph(coords, k)
    overlaps = {}
    if domain_labels is not None:
        for top_k in deg_top_ks:
            if top_k <= pred.shape[1]:
                overlaps[top_k] = deg_overlap(pred, gt, domain_labels, top_k)
    return MetricsReport(
        pcc=pcc, mse=mse,
        gsc=gsc(pred, gt),
        ssc=ssc(pred, gt, coords, k=k),
        per_gene_pcc=per_gene,
        morans_gt=morans_i_per_gene(gt, graph),
        morans_pred=morans_i_per_gene(pred, graph),
        deg_overlap=overlaps,
        n_excluded_genes=int((~np.isfinite(per_gene)).sum()),
    )
