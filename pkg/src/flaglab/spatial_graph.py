"""Observable tissue topology.

Two fixed structures are derived from a slide: the pairwise edge condition
(a Gaussian distance kernel plus visual cosine similarity, both bounded)
and the symmetric k-nearest-neighbour 0/1 graph used by spatial metrics.
Dense N x N storage throughout; this targets slides up to a few thousand
spots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .validation import check_array, check_positive

DEFAULT_LENGTH_SCALE = 224.0  # pixels; one patch width
DEFAULT_KNN_K = 8


@dataclass
class SlideSample:
    """One tissue sample: spot coordinates, visual features, expression."""

    coords: np.ndarray  # [N, 2] pixel coordinates
    visual: np.ndarray  # [N, d_v] visual embedding
    expr: np.ndarray    # [N, G] expression (log1p scale for real data)
    gene_names: list[str]
    slide_id: str = "slide"

    def __post_init__(self):
        self.coords = check_array(self.coords, "coords", ndim=2)
        self.visual = check_array(self.visual, "visual", ndim=2)
        self.expr = check_array(self.expr, "expr", ndim=2)
        n = self.coords.shape[0]
        if n < 2:
            raise ContractError(f"slide needs at least 2 spots, got {n}")
        if self.coords.shape[1] != 2:
            raise ContractError(f"coords must be [N, 2], got {self.coords.shape}")
        if self.visual.shape[0] != n or self.expr.shape[0] != n:
            raise ContractError("coords/visual/expr disagree on the number of spots")
        if len(self.gene_names) != self.expr.shape[1]:
            raise ContractError(
                f"{len(self.gene_names)} gene names for {self.expr.shape[1]} expression columns"
            )
        if len(set(self.gene_names)) != len(self.gene_names):
            raise ContractError("gene_names must be unique")
        d2 = _sq_dists(self.coords)
        np.fill_diagonal(d2, np.inf)
        if (d2 < 1e-18).any():
            raise ContractError("duplicate spot coordinates (within 1e-9)")

    @property
    def n_spots(self) -> int:
        return self.coords.shape[0]

    @property
    def n_genes(self) -> int:
        return self.expr.shape[1]


@dataclass
class EdgeCondition:
    """Pairwise condition tensor [N, N, 2]: distance kernel, visual cosine."""

    w: np.ndarray
    length_scale: float = DEFAULT_LENGTH_SCALE


@dataclass
class SpatialWeightGraph:
    """Symmetric binary k-NN adjacency with zero diagonal."""

    W: np.ndarray
    k: int
    s0: float = field(init=False)

    def __post_init__(self):
        self.s0 = float(self.W.sum())


def _sq_dists(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.einsum("ijc,ijc->ij", diff, diff)


def cosine_similarity_matrix(v: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; zero rows get 0 off-diagonal and 1 on the diagonal."""
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = v / safe[:, None]
    sim = unit @ unit.T
    sim = np.clip(sim, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def build_edge_condition(sample: SlideSample, sigma: float = DEFAULT_LENGTH_SCALE) -> EdgeCondition:
    """Stack the distance kernel exp(-d^2 / (2 sigma^2)) with visual cosine similarity."""
    check_positive(sigma, "sigma")
    if not (np.isfinite(sample.coords).all() and np.isfinite(sample.visual).all()):
        raise ContractError("coords/visual contain non-finite values")
    d2 = _sq_dists(sample.coords)
    w_dist = np.exp(-d2 / (2.0 * sigma * sigma))
    np.fill_diagonal(w_dist, 1.0)
    w_img = cosine_similarity_matrix(sample.visual)
    w = np.stack([w_dist, w_img], axis=-1)
    return EdgeCondition(w=w, length_scale=float(sigma))


def build_knn_graph(coords: np.ndarray, k: int) -> SpatialWeightGraph:
    """W_ij = 1 if j is among i's k nearest spots or vice versa; self excluded.

    Distance ties break by ascending spot index (stable argsort), so the
    graph is a deterministic function of the inputs.
    """
    coords = check_array(coords, "coords", ndim=2)
    n = coords.shape[0]
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ContractError(f"k must be < number of spots, got k={k}, N={n}")
    d2 = _sq_dists(coords)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    W = np.zeros((n, n), dtype=np.int64)
    rows = np.repeat(np.arange(n), k)
    W[rows, order[:, :k].ravel()] = 1
    W = np.maximum(W, W.T)
    np.fill_diagonal(W, 0)
    return SpatialWeightGraph(W=W, k=k)
