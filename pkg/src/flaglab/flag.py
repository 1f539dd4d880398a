"""Graph-conditioned gene diffusion with embedding alignment.

The generator factorizes the problem: a static graph encoder turns the
slide (noisy expression, visual features, fixed topology) into one context
vector per spot, and a diffusion transformer over gene tokens denoises each
spot's expression under that context. During training an intermediate
transformer layer is pulled toward frozen per-gene embeddings from a gene
foundation model via a masked cosine loss; the embeddings are never used
at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import sde
from .backbone import AdaLN, GraphBackbone, GraphBackboneConfig, TimestepEmbed
from .errors import ContractError, TrainingError
from .rng import derive_seed, torch_gen

ALIGN_EPS = 1e-8


@dataclass(frozen=True)
class DiTConfig:
    hidden: int = 384
    layers: int = 12
    heads: int = 6
    mlp_ratio: float = 4.0
    gene_dim: int = 512
    align_layer: int = 8

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ContractError(f"hidden ({self.hidden}) not divisible by heads ({self.heads})")
        if not (1 <= self.align_layer <= self.layers):
            raise ContractError(
                f"align_layer must be in [1, {self.layers}], got {self.align_layer}"
            )


@dataclass
class GFMEmbeddings:
    """Frozen per-gene embedding matrix with a validity mask.

    Rows with valid=False are all-zero placeholders for genes the source
    model could not embed; they are excluded from the alignment loss.
    """

    F: np.ndarray          # [G, d_e]
    valid: np.ndarray      # [G] bool
    source_tag: str = "unknown"

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.F.ndim != 2 or self.F.shape[1] < 1:
            raise ContractError(f"embedding matrix must be [G, d_e], got {self.F.shape}")
        if self.valid.shape != (self.F.shape[0],):
            raise ContractError("validity mask length must match the gene count")
        bad = ~self.valid & (np.abs(self.F).sum(axis=1) > 0)
        if bad.any():
            raise ContractError("rows flagged invalid must be all-zero")

    @property
    def dim(self) -> int:
        return self.F.shape[1]


@dataclass
class FlagLossReport:
    l_diff: float
    l_align: float
    lambda_align: float
    total: float


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, n, d = h.shape
        q, k, v = self.qkv(h).chunk(3, dim=-1)

        def split(x):
            return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(mixed)


class DiTBlock(nn.Module):
    def __init__(self, cfg: DiTConfig):
        super().__init__()
        inner = int(cfg.hidden * cfg.mlp_ratio)
        self.norm1 = AdaLN(cfg.hidden, cfg.hidden)
        self.attn = Attention(cfg.hidden, cfg.heads)
        self.norm2 = AdaLN(cfg.hidden, cfg.hidden)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden, inner), nn.GELU(), nn.Linear(inner, cfg.hidden)
        )

    def forward(self, h: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        h = h + self.attn(self.norm1(h, c))
        return h + self.mlp(self.norm2(h, c))


class GeneDiT(nn.Module):
    """Diffusion transformer along the gene dimension.

    Each gene becomes one token: its scalar value is lifted to gene_dim,
    embedded to the transformer width, and tagged with a learned per-gene
    identity embedding (gene order is fixed by the panel). Conditioning is
    a per-row vector consumed through adaptive layer norm in every block.

    Token values are scaled by 1/sqrt(sigma(t)^2 + 1) and the head output
    by 1/sigma(t): the transformer regresses the bounded noise direction
    while the exposed output keeps score units.
    """

    def __init__(self, cfg: DiTConfig, n_genes: int,
                 schedule: sde.NoiseSchedule | None = None):
        super().__init__()
        self.cfg = cfg
        self.n_genes = n_genes
        self.schedule = schedule if schedule is not None else sde.NoiseSchedule()
        self.value_proj = nn.Linear(1, cfg.gene_dim)
        self.token_embed = nn.Linear(cfg.gene_dim, cfg.hidden)
        self.gene_embed = nn.Parameter(torch.randn(n_genes, cfg.hidden) * 0.02)
        self.t_embed = TimestepEmbed(cfg.hidden)
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.layers))
        self.norm_out = nn.LayerNorm(cfg.hidden, eps=1e-5)
        self.head = nn.Linear(cfg.hidden, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(
        self,
        xt: torch.Tensor,      # [B, G]
        cond: torch.Tensor,    # [B, hidden]
        t,
        return_layer: int | None = None,
    ):
        if return_layer is not None and not (1 <= return_layer <= self.cfg.layers):
            raise ContractError(
                f"return_layer must be in [1, {self.cfg.layers}], got {return_layer}"
            )
        b, g = xt.shape
        if g != self.n_genes:
            raise ContractError(f"expected {self.n_genes} genes, got {g}")
        t_vec = torch.as_tensor(t, dtype=xt.dtype, device=xt.device)
        if t_vec.ndim == 0:
            t_vec = t_vec.expand(b)
        c = cond + self.t_embed(t_vec)
        sig = self.schedule.sigma(t_vec)
        c_in = (sig**2 + 1.0).rsqrt()
        h = self.token_embed(self.value_proj((xt * c_in[:, None]).unsqueeze(-1)))
        h = h + self.gene_embed
        z_inter = None
        for i, block in enumerate(self.blocks, start=1):
            h = block(h, c)
            if return_layer == i:
                z_inter = h
        score = self.head(self.norm_out(h)).squeeze(-1) / sig[:, None]
        return score, z_inter


def align_loss(
    z_inter: torch.Tensor,
    embeddings: GFMEmbeddings | tuple[torch.Tensor, torch.Tensor],
    projector: nn.Module,
    eps: float = ALIGN_EPS,
) -> torch.Tensor:
    """Negative mean cosine between projected gene tokens and frozen embeddings.

    z_inter is [..., G, hidden]; masked (invalid) genes are excluded from
    the mean. Returns a value in roughly [-1, 0] once training aligns the
    projector, -1 when the projection reproduces the embeddings exactly.
    """
    if isinstance(embeddings, GFMEmbeddings):
        f = torch.as_tensor(embeddings.F, dtype=z_inter.dtype, device=z_inter.device)
        valid = torch.as_tensor(embeddings.valid, device=z_inter.device)
    else:
        f, valid = embeddings
    if int(valid.sum()) == 0:
        raise ContractError("alignment needs at least one valid gene")
    if z_inter.shape[-2] != f.shape[0]:
        raise ContractError(
            f"z_inter has {z_inter.shape[-2]} gene tokens but embeddings have {f.shape[0]} rows"
        )
    proj = projector(z_inter)
    num = (proj * f).sum(dim=-1)
    den = proj.norm(dim=-1) * f.norm(dim=-1) + eps
    cos = num / den
    return -cos[..., valid].mean()


class FlagModel(nn.Module):
    """Static graph conditioning feeding a gene-token diffusion transformer."""

    def __init__(
        self,
        backbone_cfg: GraphBackboneConfig,
        dit_cfg: DiTConfig,
        n_genes: int,
        embed_dim: int | None = None,
        schedule: sde.NoiseSchedule | None = None,
    ):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.dit_cfg = dit_cfg
        self.n_genes = n_genes
        self.backbone = GraphBackbone(backbone_cfg, n_genes, schedule=schedule)
        self.cond_mlp = nn.Sequential(
            nn.Linear(backbone_cfg.hidden, dit_cfg.gene_dim),
            nn.SiLU(),
            nn.Linear(dit_cfg.gene_dim, dit_cfg.hidden),
        )
        self.cond_t_embed = TimestepEmbed(dit_cfg.hidden)
        self.dit = GeneDiT(dit_cfg, n_genes, schedule=schedule)
        self.align_projector = None
        if embed_dim is not None:
            self.align_projector = nn.Sequential(
                nn.Linear(dit_cfg.hidden, dit_cfg.hidden),
                nn.GELU(),
                nn.Linear(dit_cfg.hidden, embed_dim),
            )

    def spatial_condition(self, xt, ce, cv, t) -> torch.Tensor:
        """Per-spot context: bottleneck MLP over static hidden states plus t."""
        h_spatial = self.backbone.forward_static(xt, ce, cv, t)
        b = xt.shape[0]
        t_vec = torch.as_tensor(t, dtype=xt.dtype, device=xt.device)
        if t_vec.ndim == 0:
            t_vec = t_vec.expand(b)
        return self.cond_mlp(h_spatial) + self.cond_t_embed(t_vec)[:, None, :]

    def score(self, xt, cv, ce, t, return_inter: bool = False):
        """Score over [B, N, G]; spots become independent transformer rows.

        The spatial context is recomputed from the current xt, so samplers
        get a fresh conditioning signal at every evaluation point.
        """
        b, n, g = xt.shape
        cond = self.spatial_condition(xt, ce, cv, t)
        t_vec = torch.as_tensor(t, dtype=xt.dtype, device=xt.device)
        if t_vec.ndim == 0:
            t_vec = t_vec.expand(b)
        t_rows = t_vec[:, None].expand(b, n).reshape(b * n)
        rl = self.dit_cfg.align_layer if return_inter else None
        score, z_inter = self.dit(
            xt.reshape(b * n, g), cond.reshape(b * n, -1), t_rows, return_layer=rl
        )
        score = score.reshape(b, n, g)
        if return_inter:
            return score, z_inter
        return score, None


class FlagTrainer:
    """Optimizer loop: noise-prediction loss plus weighted alignment."""

    def __init__(
        self,
        model: FlagModel,
        schedule: sde.NoiseSchedule,
        embeddings: GFMEmbeddings | None = None,
        lambda_align: float = 0.5,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        grad_clip: float = 1.0,
        seed: int = 0,
    ):
        if lambda_align < 0:
            raise ContractError(f"lambda_align must be >= 0, got {lambda_align}")
        if lambda_align > 0 and embeddings is None:
            raise ContractError("lambda_align > 0 requires embeddings")
        if embeddings is not None and model.align_projector is None:
            raise ContractError("model was built without an alignment projector")
        self.model = model
        self.schedule = schedule
        self.lambda_align = float(lambda_align)
        self.grad_clip = float(grad_clip)
        self.seed = int(seed)
        self.step_count = 0
        self._emb = None
        if embeddings is not None:
            p = next(model.parameters())
            self._emb = (
                torch.as_tensor(embeddings.F, dtype=p.dtype),
                torch.as_tensor(embeddings.valid),
            )
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=lr, weight_decay=weight_decay
        )

    def losses(self, x0, cv, ce, t, z):
        xt = sde.perturb(x0, t, z, self.schedule)
        want_inter = self.lambda_align > 0
        score, z_inter = self.model.score(xt, cv, ce, t, return_inter=want_inter)
        if not torch.isfinite(score).all():
            raise TrainingError(f"non-finite score at step {self.step_count}")
        sig = sde._expand_to(self.schedule.sigma(t), x0)
        l_diff = ((z + score * sig) ** 2).mean()
        if want_inter:
            l_align = align_loss(z_inter, self._emb, self.model.align_projector)
        else:
            l_align = torch.zeros((), dtype=x0.dtype)
        return l_diff, l_align

    def train_step(self, x0, cv, ce) -> FlagLossReport:
        g = torch_gen(derive_seed(self.seed, "step", self.step_count))
        b = x0.shape[0]
        t = sde.EPS_T + (1.0 - sde.EPS_T) * torch.rand(b, generator=g, dtype=x0.dtype)
        z = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        l_diff, l_align = self.losses(x0, cv, ce, t, z)
        total = l_diff + self.lambda_align * l_align
        if not torch.isfinite(total):
            raise TrainingError(
                f"non-finite loss at step {self.step_count}: "
                f"l_diff={float(l_diff.detach()):.4g}, l_align={float(l_align.detach()):.4g}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        for name, p in self.model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in {name} at step {self.step_count}")
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.grad_clip)
        self.optimizer.step()
        self.step_count += 1
        return FlagLossReport(
            l_diff=float(l_diff.detach()), l_align=float(l_align.detach()),
            lambda_align=self.lambda_align, total=float(total.detach()),
        )


@torch.no_grad()
def flag_sample(
    model: FlagModel,
    cv: torch.Tensor,
    ce: torch.Tensor,
    schedule: sde.NoiseSchedule,
    steps: int = 100,
    seed: int = 0,
) -> np.ndarray:
    """Draw one slide's expression [N, G] via the Heun PF-ODE sampler.

    The spatial context is recomputed inside the score closure at every
    predictor/corrector evaluation, then a final Tweedie projection lands
    the state at t=0.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    n = cv.shape[1]
    g = torch_gen(derive_seed(seed, "prior"))
    x_init = schedule.sigma_max * torch.randn(
        (1, n, model.n_genes), generator=g, dtype=cv.dtype
    )

    def score_fn(x, t):
        return model.score(x, cv, ce, t)[0]

    x = sde.heun_integrate(x_init, score_fn, schedule, steps=steps)
    return x[0].numpy().astype(np.float64)
