"""Joint node-edge diffusion baseline (and its node-only restriction).

Both spot expression X and the functional edge matrix A = corr(X) are
treated as generative targets under a shared VE schedule. The training
objective combines per-stream denoising score matching with an L1
consistency penalty tying the denoised edges to the correlation of the
denoised expression. Sampling integrates the coupled probability-flow ODE
with the same Heun scheme as the single-stream case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import sde
from .backbone import GraphBackbone, GraphBackboneConfig
from .errors import ContractError, SamplerDivergenceError, TrainingError
from .rng import derive_seed, torch_gen


@dataclass
class GraphState:
    """A (possibly noisy) node-edge pair; clean states satisfy A = corr(X)."""

    Xt: np.ndarray  # [N, G]
    At: np.ndarray  # [N, N]

    @classmethod
    def clean(cls, x0: np.ndarray, eps: float = 1e-8) -> "GraphState":
        x = torch.as_tensor(np.asarray(x0, dtype=np.float64))
        a = empirical_correlation(x, eps=eps).numpy()
        return cls(Xt=np.asarray(x0, dtype=np.float64), At=a)


@dataclass
class JointLossReport:
    l_graph: float
    l_cons: float
    lambda_c: float
    total: float


def empirical_correlation(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Pearson correlation between spot rows of x [..., N, G].

    Centred rows are normalised by their root sum of squares with an eps
    guard in the denominator, so zero-variance spots yield zero rows
    instead of NaN. Differentiable.
    """
    if x.shape[-1] < 2:
        raise ContractError(f"correlation needs G >= 2 genes, got {x.shape[-1]}")
    if x.shape[-2] < 2:
        raise ContractError(f"correlation needs N >= 2 spots, got {x.shape[-2]}")
    xc = x - x.mean(dim=-1, keepdim=True)
    ss = xc.pow(2).sum(dim=-1).sqrt()
    denom = ss.unsqueeze(-1) * ss.unsqueeze(-2) + eps
    return (xc @ xc.transpose(-1, -2)) / denom


def symmetrize_edges(a: np.ndarray) -> tuple[np.ndarray, float]:
    """(A + A^T)/2 with the diagonal reset to 1; also returns ||A - A^T||_F.

    The generative process does not enforce symmetry, so sampled edge
    matrices pass through here before any metric consumes them.
    """
    asym = float(np.linalg.norm(a - a.T))
    sym = 0.5 * (a + a.T)
    np.fill_diagonal(sym, 1.0)
    return sym, asym


class JointScoreModel(nn.Module):
    """Backbone in dynamic mode: s(Xt, At, t, C) -> (score_X, score_A)."""

    def __init__(self, cfg: GraphBackboneConfig, n_genes: int, schedule=None):
        super().__init__()
        self.backbone = GraphBackbone(cfg, n_genes, schedule=schedule)

    def forward(self, xt, at, cv, ce, t):
        if at.ndim == 3:
            at = at.unsqueeze(-1)
        return self.backbone.forward_dynamic(xt, at, cv, ce, t)


class NodeOnlyScoreModel(nn.Module):
    """Backbone in static mode with the node score head: edges stay fixed."""

    def __init__(self, cfg: GraphBackboneConfig, n_genes: int, schedule=None):
        super().__init__()
        self.backbone = GraphBackbone(cfg, n_genes, schedule=schedule)

    def forward(self, xt, cv, ce, t):
        return self.backbone.forward_node_score(xt, cv, ce, t)


def graph_score_loss(
    model: nn.Module,
    xt: torch.Tensor,
    at: torch.Tensor,
    x0: torch.Tensor,
    a0: torch.Tensor,
    t,
    cond: tuple[torch.Tensor, torch.Tensor],
    schedule: sde.NoiseSchedule,
    weighting: str = "uniform",
) -> torch.Tensor:
    """Sum of node and edge denoising score-matching terms.

    weighting="uniform" regresses the raw scores (the plain objective);
    "sigma2" multiplies the per-sample error by sigma(t), which equals the
    noise-prediction form used for training.
    """
    cv, ce = cond
    score_x, score_a = model(xt, at, cv, ce, t)
    if not (torch.isfinite(score_x).all() and torch.isfinite(score_a).all()):
        raise TrainingError("joint model produced non-finite scores")
    err_x = score_x - sde.true_perturbation_score(xt, x0, t, schedule)
    err_a = score_a - sde.true_perturbation_score(at, a0, t, schedule)
    if weighting == "sigma2":
        err_x = err_x * sde._expand_to(schedule.sigma(t), err_x)
        err_a = err_a * sde._expand_to(schedule.sigma(t), err_a)
    elif weighting != "uniform":
        raise ContractError(f"unknown weighting {weighting!r}")
    return (err_x**2).mean() + (err_a**2).mean()


def consistency_loss(
    xt: torch.Tensor,
    at: torch.Tensor,
    score_x: torch.Tensor,
    score_a: torch.Tensor,
    t,
    schedule: sde.NoiseSchedule,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Mean off-diagonal L1 gap between denoised edges and corr(denoised X).

    Both streams are Tweedie-denoised at t; gradients flow through both
    branches. Returns sum_{i != j} |A0_hat - corr(X0_hat)| / (N (N-1)),
    averaged over any leading batch dimension.
    """
    n = xt.shape[-2]
    if n < 2:
        raise ContractError(f"consistency loss needs N >= 2 spots, got {n}")
    x0_hat = sde.tweedie_denoise(xt, score_x, t, schedule)
    a0_hat = sde.tweedie_denoise(at, score_a, t, schedule)
    p_pred = empirical_correlation(x0_hat, eps=eps)
    gap = (a0_hat - p_pred).abs()
    off = 1.0 - torch.eye(n, dtype=xt.dtype, device=xt.device)
    per_item = (gap * off).sum(dim=(-2, -1)) / (n * (n - 1))
    return per_item.mean()


class JointTrainer:
    """Single-writer optimizer loop for the joint model.

    Each step derives its own RNG stream from (seed, step index), so a run
    is reproducible and resumable from the step counter alone.
    """

    def __init__(
        self,
        model: JointScoreModel,
        schedule: sde.NoiseSchedule,
        lambda_c: float = 1.0,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        grad_clip: float = 1.0,
        seed: int = 0,
        weighting: str = "sigma2",
    ):
        if lambda_c < 0:
            raise ContractError(f"lambda_c must be >= 0, got {lambda_c}")
        self.model = model
        self.schedule = schedule
        self.lambda_c = float(lambda_c)
        self.grad_clip = float(grad_clip)
        self.seed = int(seed)
        self.weighting = weighting
        self.step_count = 0
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=lr, weight_decay=weight_decay
        )

    def losses(self, x0, a0, cv, ce, t, z_x, z_a):
        xt = sde.perturb(x0, t, z_x, self.schedule)
        at = sde.perturb(a0, t, z_a, self.schedule)
        score_x, score_a = self.model(xt, at, cv, ce, t)
        if not (torch.isfinite(score_x).all() and torch.isfinite(score_a).all()):
            raise TrainingError(f"non-finite model output at step {self.step_count}")
        sig = sde._expand_to(self.schedule.sigma(t), x0)
        if self.weighting == "sigma2":
            l_graph = ((z_x + score_x * sig) ** 2).mean() + (
                (z_a + score_a * sig) ** 2
            ).mean()
        else:
            l_graph = (
                (score_x - sde.true_perturbation_score(xt, x0, t, self.schedule)) ** 2
            ).mean() + (
                (score_a - sde.true_perturbation_score(at, a0, t, self.schedule)) ** 2
            ).mean()
        l_cons = consistency_loss(xt, at, score_x, score_a, t, self.schedule)
        return l_graph, l_cons

    def train_step(self, x0, a0, cv, ce) -> JointLossReport:
        g = torch_gen(derive_seed(self.seed, "step", self.step_count))
        b = x0.shape[0]
        t = sde.EPS_T + (1.0 - sde.EPS_T) * torch.rand(
            b, generator=g, dtype=x0.dtype
        )
        z_x = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        z_a = torch.randn(a0.shape, generator=g, dtype=a0.dtype)
        l_graph, l_cons = self.losses(x0, a0, cv, ce, t, z_x, z_a)
        total = l_graph + self.lambda_c * l_cons
        if not torch.isfinite(total):
            raise TrainingError(
                f"non-finite loss at step {self.step_count}: "
                f"l_graph={float(l_graph.detach()):.4g}, l_cons={float(l_cons.detach()):.4g}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        for name, p in self.model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in {name} at step {self.step_count}")
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return JointLossReport(
            l_graph=float(l_graph.detach()), l_cons=float(l_cons.detach()),
            lambda_c=self.lambda_c, total=float(total.detach()),
        )


@torch.no_grad()
def joint_sample(
    model: JointScoreModel,
    cv: torch.Tensor,
    ce: torch.Tensor,
    schedule: sde.NoiseSchedule,
    steps: int,
    seed: int,
    n_genes: int,
) -> GraphState:
    """Heun-integrate the coupled PF-ODE from Gaussian priors on both streams.

    Returns the raw denoised (X0_hat, A0_hat); callers symmetrize the edge
    matrix with `symmetrize_edges` before using it as a correlation.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    n = cv.shape[1]
    dtype = cv.dtype
    g = torch_gen(derive_seed(seed, "prior"))
    x = schedule.sigma_max * torch.randn((1, n, n_genes), generator=g, dtype=dtype)
    a = schedule.sigma_max * torch.randn((1, n, n), generator=g, dtype=dtype)
    grid = sde.uniform_time_grid(steps)
    for i in range(len(grid) - 1):
        t_cur, t_next = float(grid[i]), float(grid[i + 1])
        dt = t_next - t_cur
        sx1, sa1 = model(x, a, cv, ce, t_cur)
        d1x = -0.5 * schedule.g_squared(t_cur) * sx1
        d1a = -0.5 * schedule.g_squared(t_cur) * sa1
        sx2, sa2 = model(x + d1x * dt, a + d1a * dt, cv, ce, t_next)
        d2x = -0.5 * schedule.g_squared(t_next) * sx2
        d2a = -0.5 * schedule.g_squared(t_next) * sa2
        x = x + 0.5 * (d1x + d2x) * dt
        a = a + 0.5 * (d1a + d2a) * dt
        if not (torch.isfinite(x).all() and torch.isfinite(a).all()):
            raise SamplerDivergenceError("joint sampler diverged", step=i)
    t_end = float(grid[-1])
    sx, sa = model(x, a, cv, ce, t_end)
    x = sde.tweedie_denoise(x, sx, t_end, schedule)
    a = sde.tweedie_denoise(a, sa, t_end, schedule)
    return GraphState(Xt=x[0].numpy().astype(np.float64),
                      At=a[0].numpy().astype(np.float64))


class NodeOnlyTrainer:
    """DSM-only loop for the node-only model (fixed observable topology)."""

    def __init__(
        self,
        model: NodeOnlyScoreModel,
        schedule: sde.NoiseSchedule,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        grad_clip: float = 1.0,
        seed: int = 0,
    ):
        self.model = model
        self.schedule = schedule
        self.grad_clip = float(grad_clip)
        self.seed = int(seed)
        self.step_count = 0
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=lr, weight_decay=weight_decay
        )

    def train_step(self, x0, cv, ce) -> float:
        g = torch_gen(derive_seed(self.seed, "step", self.step_count))
        b = x0.shape[0]
        t = sde.EPS_T + (1.0 - sde.EPS_T) * torch.rand(b, generator=g, dtype=x0.dtype)
        z = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        xt = sde.perturb(x0, t, z, self.schedule)
        score = self.model(xt, cv, ce, t)
        if not torch.isfinite(score).all():
            raise TrainingError(f"non-finite model output at step {self.step_count}")
        sig = sde._expand_to(self.schedule.sigma(t), x0)
        loss = ((z + score * sig) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {self.step_count}")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return float(loss.detach())


@torch.no_grad()
def node_only_sample(
    model: NodeOnlyScoreModel,
    cv: torch.Tensor,
    ce: torch.Tensor,
    schedule: sde.NoiseSchedule,
    steps: int,
    seed: int,
    n_genes: int,
) -> np.ndarray:
    n = cv.shape[1]
    g = torch_gen(derive_seed(seed, "prior"))
    x_init = schedule.sigma_max * torch.randn((1, n, n_genes), generator=g, dtype=cv.dtype)
    x = sde.heun_integrate(
        x_init, lambda xx, tt: model(xx, cv, ce, tt), schedule, steps=steps
    )
    return x[0].numpy().astype(np.float64)
