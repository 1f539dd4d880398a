"""Covariance-concentration experiments and training sweeps.

The Monte-Carlo side quantifies how the spot-spot Gram estimator
A_hat = X X^T / G concentrates as the gene panel grows: its mean squared
Frobenius error scales like N^2/G, and the inverse of the smallest
eigenvalue of the estimator's fluctuation covariance (a Fisher-information
proxy for the conditional edge score) grows linearly in G. The training
side reproduces the practical consequence on synthetic slides: joint
node-edge diffusion degrades with G while the graph-conditioned gene
generator holds up, and richer edge priors help a node-only predictor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as sps

from .data import SyntheticSpec, synth_cohort
from .errors import ContractError, FlagLabError
from .estimators import (FlagEstimator, JointDiffusionEstimator,
                         NodeOnlyEstimator)
from .metrics import gsc, pcc_mse, ssc
from .rng import derive_seed, numpy_gen

_CHUNK_ELEMS = 2**24  # cap per-chunk draw size (floats)


@dataclass
class ScalingResult:
    G_values: list[int]
    statistic: np.ndarray
    trials: int
    slope_loglog: float
    ci_95: tuple[float, float]


def _loglog_fit(g_values, statistic) -> tuple[float, tuple[float, float]]:
    x = np.log(np.asarray(g_values, dtype=np.float64))
    y = np.log(np.asarray(statistic, dtype=np.float64))
    res = sps.linregress(x, y)
    df = len(x) - 2
    if df > 0 and np.isfinite(res.stderr):
        half = sps.t.ppf(0.975, df) * res.stderr
    else:
        half = np.inf
    return float(res.slope), (float(res.slope - half), float(res.slope + half))


def _draw_gram(chol: np.ndarray, g: int, trials: int, rng) -> np.ndarray:
    """A_hat = X X^T / g for `trials` draws, chunked to bound memory."""
    n = chol.shape[0]
    out = np.empty((trials, n, n))
    chunk = max(1, min(trials, _CHUNK_ELEMS // (n * g)))
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        x = chol @ rng.standard_normal((b, n, g))
        out[done:done + b] = x @ x.transpose(0, 2, 1) / g
        done += b
    return out


def gram_error_experiment(N: int, G_values, trials: int, a_star: np.ndarray | None = None,
                          seed: int = 0) -> ScalingResult:
    """Monte-Carlo E||A_hat - A*||_F^2 per G with a log-log slope fit."""
    if trials < 50:
        raise ContractError(f"need at least 50 trials, got {trials}")
    a_star = np.eye(N) if a_star is None else np.asarray(a_star, dtype=np.float64)
    chol = np.linalg.cholesky(a_star)
    g_values = [int(g) for g in G_values]
    stats = []
    for gi, g in enumerate(g_values):
        rng = numpy_gen(derive_seed(seed, "gram", gi))
        a_hat = _draw_gram(chol, g, trials, rng)
        d = a_hat - a_star
        stats.append(float(np.einsum("tij,tij->t", d, d).mean()))
    statistic = np.asarray(stats)
    slope, ci = _loglog_fit(g_values, statistic)
    return ScalingResult(G_values=g_values, statistic=statistic, trials=trials,
                         slope_loglog=slope, ci_95=ci)


def offdiag_concentration(N: int, G_values, trials: int,
                          a_star: np.ndarray | None = None, seed: int = 0) -> np.ndarray:
    """Std of off-diagonal A_hat entries per G (how thin the consistent set gets)."""
    a_star = np.eye(N) if a_star is None else np.asarray(a_star, dtype=np.float64)
    chol = np.linalg.cholesky(a_star)
    mask = ~np.eye(N, dtype=bool)
    out = []
    for gi, g in enumerate(G_values):
        rng = numpy_gen(derive_seed(seed, "spread", gi))
        a_hat = _draw_gram(chol, int(g), trials, rng)
        out.append(float((a_hat - a_star)[:, mask].std()))
    return np.asarray(out)


def upper_triangle_covariance(N: int, G: int, trials: int,
                              a_star: np.ndarray | None = None,
                              seed: int = 0) -> np.ndarray:
    """Empirical covariance of vec-upper-triangle(A_hat) (diagonal included)."""
    a_star = np.eye(N) if a_star is None else np.asarray(a_star, dtype=np.float64)
    chol = np.linalg.cholesky(a_star)
    rng = numpy_gen(derive_seed(seed, "fisher", G))
    a_hat = _draw_gram(chol, int(G), trials, rng)
    iu = np.triu_indices(N)
    v = a_hat[:, iu[0], iu[1]]
    return np.cov(v, rowvar=False)


def fisher_scaling(N: int, G_values, trials: int, a_star: np.ndarray | None = None,
                   seed: int = 0) -> ScalingResult:
    """1 / lambda_min of the Gram-fluctuation covariance per G.

    This is the largest eigenvalue of the Fisher information of the
    conditional edge distribution, the quantity whose linear growth in G
    makes the edge score stiff.
    """
    if trials < 200:
        raise ContractError(f"need at least 200 trials per G, got {trials}")
    g_values = [int(g) for g in G_values]
    stats = []
    for g in g_values:
        sigma_a = upper_triangle_covariance(N, g, trials, a_star=a_star, seed=seed)
        lam_min = float(np.linalg.eigvalsh(sigma_a).min())
        if lam_min <= 0:
            raise FlagLabError(
                f"singular fluctuation covariance at G={g}; increase trials "
                f"(need well above the edge-space dimension {sigma_a.shape[0]})"
            )
        stats.append(1.0 / lam_min)
    statistic = np.asarray(stats)
    slope, ci = _loglog_fit(g_values, statistic)
    return ScalingResult(G_values=g_values, statistic=statistic, trials=trials,
                         slope_loglog=slope, ci_95=ci)


# ---------------------------------------------------------------------------
# training sweeps on synthetic cohorts

DEFAULT_SWEEP_G = (10, 50, 100, 200)
DEFAULT_SWEEP_N = 64

_ESTIMATORS = {
    "flag": FlagEstimator,
    "joint": JointDiffusionEstimator,
    "node_only": NodeOnlyEstimator,
}


def default_sweep_configs() -> dict[str, dict]:
    """Desk-scale estimator settings: small widths, short schedules.

    The sweep compares methods under an equal step budget, so these favor
    fast steps over headline capacity.
    """
    common = dict(
        backbone_hidden=32, backbone_layers=2, backbone_heads=4,
        lr=1e-3, sample_steps=50,
    )
    return {
        "joint": dict(common, lambda_c=1.0),
        "node_only": dict(common),
        "flag": dict(common, dit_hidden=32, dit_layers=2, dit_heads=4,
                     gene_dim=32, align_layer=2, lambda_align=0.0),
    }


@dataclass
class SweepCell:
    method: str
    G: int
    pcc: float
    mse: float
    gsc: float
    ssc: float
    collapsed: bool = False


@dataclass
class SweepResult:
    cells: list[SweepCell] = field(default_factory=list)

    def pcc(self, method: str) -> dict[int, float]:
        return {c.G: c.pcc for c in self.cells if c.method == method}

    def to_csv(self) -> str:
        lines = ["method,G,pcc,mse,gsc,ssc,collapsed"]
        for c in self.cells:
            lines.append(
                f"{c.method},{c.G},{c.pcc!r},{c.mse!r},{c.gsc!r},{c.ssc!r},{int(c.collapsed)}"
            )
        return "\n".join(lines) + "\n"


def _evaluate_cell(est, train_slides, eval_slides, seed):
    est.fit(train_slides)
    pccs, mses, gscs, sscs = [], [], [], []
    for j, ev in enumerate(eval_slides):
        pred = est.predict(ev, seed=derive_seed(seed, "eval", j))
        p, m, _ = pcc_mse(pred, ev.expr)
        pccs.append(p)
        mses.append(m)
        gscs.append(gsc(pred, ev.expr))
        sscs.append(ssc(pred, ev.expr, ev.coords))
    return (float(np.mean(pccs)), float(np.mean(mses)),
            float(np.mean(gscs)), float(np.mean(sscs)))


def dimension_sweep(
    G_values=DEFAULT_SWEEP_G,
    trainer_configs: dict[str, dict] | None = None,
    synth_spec: SyntheticSpec | None = None,
    budget: int = 2000,
    seed: int = 0,
    n_train_slides: int = 4,
    n_eval_slides: int = 2,
) -> SweepResult:
    """Train each method at each gene panel size under a fixed step budget.

    Divergence or an undefined metric in a cell is recorded as NaN with a
    collapse flag rather than aborting the sweep.
    """
    if trainer_configs is None:
        trainer_configs = default_sweep_configs()
    unknown = set(trainer_configs) - set(_ESTIMATORS)
    if unknown:
        raise ContractError(f"unknown trainer configs {sorted(unknown)}")
    base_spec = synth_spec or SyntheticSpec(N=DEFAULT_SWEEP_N, seed=seed)
    result = SweepResult()
    for g in G_values:
        spec_g = replace(base_spec, G=int(g))
        slides, _ = synth_cohort(spec_g, n_train_slides + n_eval_slides)
        train, evals = slides[:n_train_slides], slides[n_train_slides:]
        for method, kwargs in trainer_configs.items():
            cell_seed = derive_seed(seed, method, int(g))
            kwargs = {k: v for k, v in kwargs.items()
                      if k not in ("train_steps", "seed")}
            est = _ESTIMATORS[method](
                **kwargs, train_steps=budget, seed=cell_seed,
            )
            try:
                pcc, mse, gsc_v, ssc_v = _evaluate_cell(est, train, evals, cell_seed)
                result.cells.append(SweepCell(method, int(g), pcc, mse, gsc_v, ssc_v))
            except FlagLabError:
                result.cells.append(SweepCell(
                    method, int(g), float("nan"), float("nan"), float("nan"),
                    float("nan"), collapsed=True,
                ))
    return result


EDGE_ABLATION_ARMS = {
    "img": ("img",),
    "img+dist": ("dist", "img"),
    "img+dist+oracle_corr": ("dist", "img", "oracle_corr"),
}


@dataclass
class EdgeAblationResult:
    pcc: dict[str, float]

    def to_csv(self) -> str:
        lines = ["edges,pcc"]
        for name, value in self.pcc.items():
            lines.append(f"{name},{value!r}")
        return "\n".join(lines) + "\n"


def edge_ablation(
    synth_spec: SyntheticSpec | None = None,
    seed: int = 0,
    budget: int = 2000,
    n_train_slides: int = 4,
    n_eval_slides: int = 2,
    estimator_kwargs: dict | None = None,
) -> EdgeAblationResult:
    """Node-only predictor PCC under growing edge priors.

    The oracle arm feeds the ground-truth spot-spot expression correlation
    as an extra edge channel (on evaluation slides too, by construction).
    """
    spec = synth_spec or SyntheticSpec(N=DEFAULT_SWEEP_N, G=50, seed=seed)
    kwargs = dict(default_sweep_configs()["node_only"])
    kwargs.update(estimator_kwargs or {})
    kwargs = {k: v for k, v in kwargs.items()
              if k not in ("train_steps", "seed", "edge_channels")}
    slides, _ = synth_cohort(spec, n_train_slides + n_eval_slides)
    train, evals = slides[:n_train_slides], slides[n_train_slides:]
    out = {}
    for name, channels in EDGE_ABLATION_ARMS.items():
        arm_seed = derive_seed(seed, "edges", name)
        est = NodeOnlyEstimator(
            **kwargs, edge_channels=channels, train_steps=budget, seed=arm_seed,
        )
        pcc, _, _, _ = _evaluate_cell(est, train, evals, arm_seed)
        out[name] = pcc
    return EdgeAblationResult(pcc=out)
