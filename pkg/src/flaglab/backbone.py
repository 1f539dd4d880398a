"""Spatial graph-transformer backbone.

Blocks combine adaptive layer norm, attention whose logits are gated and
biased by edge states, and dual node/edge residual streams with gated-GELU
feed-forwards. The same weights serve two modes:

* dynamic: node and edge streams both evolve (joint node-edge diffusion);
  outputs a score head per stream.
* static: the dynamic edge stream is suppressed and attention is modulated
  only by the fixed edge condition; outputs per-spot hidden states.

Static mode is the exact restriction of the dynamic node path obtained by
zeroing the dynamic-edge gate/bias maps, which the tests check numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContractError
from .sde import NoiseSchedule


@dataclass(frozen=True)
class GraphBackboneConfig:
    hidden: int = 384
    layers: int = 6
    heads: int = 8
    cond_dim: int = 1024
    edge_dim: int = 2
    alpha_init: float = 0.1
    gamma_init: float = 0.1

    def __post_init__(self):
        if min(self.hidden, self.layers, self.heads, self.cond_dim, self.edge_dim) <= 0:
            raise ContractError("all backbone dimensions must be positive")
        if self.hidden % self.heads != 0:
            raise ContractError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})"
            )


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of a continuous time in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * 1000.0 * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class TimestepEmbed(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(timestep_features(t, self.dim))


class AdaLN(nn.Module):
    """(1 + gamma(z)) * LayerNorm(h) + beta(z), with gamma/beta regressed from z.

    The modulation map starts at zero, so a fresh module is a plain layer
    norm. Zero-variance rows are stabilised by the norm's eps (1e-5).
    """

    def __init__(self, dim: int, z_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-5)
        self.to_mod = nn.Linear(z_dim, 2 * dim)
        nn.init.zeros_(self.to_mod.weight)
        nn.init.zeros_(self.to_mod.bias)

    def forward(self, h: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.to_mod(z).chunk(2, dim=-1)
        shape = (h.shape[0],) + (1,) * (h.ndim - 2) + (h.shape[-1],)
        return (1 + gamma.reshape(shape)) * self.norm(h) + beta.reshape(shape)


class EdgeModulatedAttention(nn.Module):
    """Attention logits gated and biased by edge features.

    S_ij = (q_i . k_j / sqrt(d)) * (1 + Lin(He_ij) + alpha * Lin(Ce_ij))
           + Lin(He_ij) + gamma * Lin(Ce_ij)

    per head; all Lin maps produce one scalar per head. With he=None the
    dynamic-edge terms drop out (static mode).
    """

    def __init__(self, cfg: GraphBackboneConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.hidden // cfg.heads
        self.q_proj = nn.Linear(cfg.hidden, cfg.hidden)
        self.k_proj = nn.Linear(cfg.hidden, cfg.hidden)
        self.v_proj = nn.Linear(cfg.hidden, cfg.hidden)
        self.gate_edge = nn.Linear(cfg.hidden, cfg.heads)
        self.bias_edge = nn.Linear(cfg.hidden, cfg.heads)
        self.gate_cond = nn.Linear(cfg.edge_dim, cfg.heads)
        self.bias_cond = nn.Linear(cfg.edge_dim, cfg.heads)
        self.alpha = nn.Parameter(torch.tensor(float(cfg.alpha_init)))
        self.gamma = nn.Parameter(torch.tensor(float(cfg.gamma_init)))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def values(self, hx_hat: torch.Tensor) -> torch.Tensor:
        return self._split(self.v_proj(hx_hat))

    def forward(
        self,
        hx_hat: torch.Tensor,
        he_hat: torch.Tensor | None,
        ce: torch.Tensor,
    ) -> torch.Tensor:
        q = self._split(self.q_proj(hx_hat))
        k = self._split(self.k_proj(hx_hat))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)  # [B,H,N,N]
        gate_c = self.gate_cond(ce).permute(0, 3, 1, 2)
        bias_c = self.bias_cond(ce).permute(0, 3, 1, 2)
        gate = 1 + self.alpha * gate_c
        bias = self.gamma * bias_c
        if he_hat is not None:
            gate = gate + self.gate_edge(he_hat).permute(0, 3, 1, 2)
            bias = bias + self.bias_edge(he_hat).permute(0, 3, 1, 2)
        return logits * gate + bias


class NodeUpdate(nn.Module):
    """Residual attention aggregation: Hx + Lin_out(softmax(S) V)."""

    def __init__(self, cfg: GraphBackboneConfig):
        super().__init__()
        self.out_proj = nn.Linear(cfg.hidden, cfg.hidden)

    def forward(self, hx: torch.Tensor, s: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        attn = torch.softmax(s, dim=-1)
        mixed = attn @ v  # [B,H,N,dh]
        b, h, n, dh = mixed.shape
        merged = mixed.transpose(1, 2).reshape(b, n, h * dh)
        return hx + self.out_proj(merged)


class EdgeUpdate(nn.Module):
    """Residual edge refresh from the raw logits: He + Lin_edge(S)."""

    def __init__(self, cfg: GraphBackboneConfig):
        super().__init__()
        self.edge_proj = nn.Linear(cfg.heads, cfg.hidden)

    def forward(self, he: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        return he + self.edge_proj(s.permute(0, 2, 3, 1))


class GEGLU(nn.Module):
    """W2 (GELU(W_gate h) * (W_val h))."""

    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        inner = dim * mult
        self.w_gate = nn.Linear(dim, inner)
        self.w_val = nn.Linear(dim, inner)
        self.w_out = nn.Linear(inner, dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.w_out(torch.nn.functional.gelu(self.w_gate(h)) * self.w_val(h))


class GraphBlock(nn.Module):
    def __init__(self, cfg: GraphBackboneConfig):
        super().__init__()
        z_dim = cfg.hidden
        self.norm_x_attn = AdaLN(cfg.hidden, z_dim)
        self.norm_e_attn = AdaLN(cfg.hidden, z_dim)
        self.attn = EdgeModulatedAttention(cfg)
        self.node_update = NodeUpdate(cfg)
        self.edge_update = EdgeUpdate(cfg)
        self.norm_x_ffn = AdaLN(cfg.hidden, z_dim)
        self.norm_e_ffn = AdaLN(cfg.hidden, z_dim)
        self.ffn_x = GEGLU(cfg.hidden)
        self.ffn_e = GEGLU(cfg.hidden)

    def forward(self, hx, he, ce, z):
        hx_hat = self.norm_x_attn(hx, z)
        he_hat = None if he is None else self.norm_e_attn(he, z)
        s = self.attn(hx_hat, he_hat, ce)
        hx = self.node_update(hx, s, self.attn.values(hx_hat))
        hx = hx + self.ffn_x(self.norm_x_ffn(hx, z))
        if he is not None:
            he = self.edge_update(he, s)
            he = he + self.ffn_e(self.norm_e_ffn(he, z))
        return hx, he


class GraphBackbone(nn.Module):
    """Dual-mode spatial backbone over a slide's spots.

    Inputs follow the slide layout: node state [B, N, G], edge state
    [B, N, N, 1] (dynamic only), visual condition [B, N, cond_dim], edge
    condition [B, N, N, edge_dim], time scalar or [B].

    Noisy inputs are scaled by 1/sqrt(sigma(t)^2 + 1) before embedding and
    score heads divide by sigma(t), so the trainable parts see and produce
    O(1) quantities across the whole noise range while the exposed scores
    keep their analytic magnitude.
    """

    def __init__(self, cfg: GraphBackboneConfig, n_genes: int,
                 schedule: NoiseSchedule | None = None):
        super().__init__()
        self.cfg = cfg
        self.n_genes = n_genes
        self.schedule = schedule if schedule is not None else NoiseSchedule()
        self.node_embed = nn.Linear(n_genes + cfg.cond_dim, cfg.hidden)
        self.edge_embed = nn.Linear(1 + cfg.edge_dim, cfg.hidden)
        self.t_embed = TimestepEmbed(cfg.hidden)
        fuse_in = cfg.hidden + cfg.cond_dim + cfg.edge_dim
        self.fuse = nn.Sequential(
            nn.Linear(fuse_in, cfg.hidden), nn.SiLU(), nn.Linear(cfg.hidden, cfg.hidden)
        )
        self.blocks = nn.ModuleList(GraphBlock(cfg) for _ in range(cfg.layers))
        self.norm_out_x = nn.LayerNorm(cfg.hidden, eps=1e-5)
        self.norm_out_e = nn.LayerNorm(cfg.hidden, eps=1e-5)
        self.node_head = nn.Linear(cfg.hidden, n_genes)
        self.edge_head = nn.Linear(cfg.hidden, 1)
        nn.init.zeros_(self.node_head.weight)
        nn.init.zeros_(self.node_head.bias)
        nn.init.zeros_(self.edge_head.weight)
        nn.init.zeros_(self.edge_head.bias)

    def _time(self, t, batch: int, ref: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=ref.dtype, device=ref.device)
        if t.ndim == 0:
            t = t.expand(batch)
        if t.shape[0] != batch:
            raise ContractError(f"t has {t.shape[0]} entries for batch {batch}")
        return t

    def _fuse_context(self, cv, ce, t_vec):
        pooled_cv = cv.mean(dim=1)
        pooled_ce = ce.mean(dim=(1, 2))
        return self.fuse(torch.cat([self.t_embed(t_vec), pooled_cv, pooled_ce], dim=-1))

    def _check_inputs(self, xt, cv, ce):
        b, n, g = xt.shape
        if g != self.n_genes:
            raise ContractError(f"expected {self.n_genes} genes, got {g}")
        if cv.shape[:2] != (b, n) or cv.shape[2] != self.cfg.cond_dim:
            raise ContractError(f"cv must be [B, N, {self.cfg.cond_dim}], got {tuple(cv.shape)}")
        if ce.shape != (b, n, n, self.cfg.edge_dim):
            raise ContractError(
                f"ce must be [B, N, N, {self.cfg.edge_dim}], got {tuple(ce.shape)}"
            )

    def _sigma(self, t_vec: torch.Tensor) -> torch.Tensor:
        return self.schedule.sigma(t_vec)

    def hidden_states(self, xt, at, cv, ce, t):
        """Run the blocks; returns (node hidden, edge hidden or None, z)."""
        self._check_inputs(xt, cv, ce)
        b, n, _ = xt.shape
        t_vec = self._time(t, b, xt)
        z = self._fuse_context(cv, ce, t_vec)
        c_in = (self._sigma(t_vec) ** 2 + 1.0).rsqrt()
        hx = self.node_embed(torch.cat([xt * c_in[:, None, None], cv], dim=-1))
        he = None
        if at is not None:
            if at.ndim == 3:
                at = at.unsqueeze(-1)
            if at.shape != (b, n, n, 1):
                raise ContractError(f"at must be [B, N, N, 1], got {tuple(at.shape)}")
            he = self.edge_embed(
                torch.cat([at * c_in[:, None, None, None], ce], dim=-1)
            )
        for block in self.blocks:
            hx, he = block(hx, he, ce, z)
        return hx, he, z

    def forward_dynamic(self, xt, at, cv, ce, t):
        """Joint mode: returns (score_X [B,N,G], score_A [B,N,N])."""
        if at is None:
            raise ContractError("dynamic mode requires an edge state")
        hx, he, _ = self.hidden_states(xt, at, cv, ce, t)
        inv_sig = 1.0 / self._sigma(self._time(t, xt.shape[0], xt))
        score_x = self.node_head(self.norm_out_x(hx)) * inv_sig[:, None, None]
        score_a = self.edge_head(self.norm_out_e(he)).squeeze(-1) * inv_sig[:, None, None]
        return score_x, score_a

    def forward_static(self, xt, ce, cv, t):
        """Static mode: fixed topology only; returns spot hidden states [B,N,hidden]."""
        hx, _, _ = self.hidden_states(xt, None, cv, ce, t)
        return self.norm_out_x(hx)

    def forward_node_score(self, xt, cv, ce, t):
        """Node-only diffusion score: static pass followed by the node head."""
        inv_sig = 1.0 / self._sigma(self._time(t, xt.shape[0], xt))
        return self.node_head(self.forward_static(xt, ce, cv, t)) * inv_sig[:, None, None]
