"""Estimator wrappers with the fit/predict surface.

Three generators share one calling convention: fit on a list of slides,
predict a held-out slide's expression from its coordinates and visual
features. Parameters follow sklearn conventions (constructor args are
plain values, fitted state gets a trailing underscore), so the models
compose with the wider ecosystem (cloning, grid search, pipelines).
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import flag as flag_mod
from . import joint as joint_mod
from .backbone import GraphBackboneConfig
from .errors import ContractError
from .flag import DiTConfig, FlagModel, FlagTrainer, GFMEmbeddings
from .joint import (JointScoreModel, JointTrainer, NodeOnlyScoreModel,
                    NodeOnlyTrainer, symmetrize_edges)
from .metrics import pcc_mse
from .rng import derive_seed, numpy_gen
from .sde import NoiseSchedule
from .spatial_graph import SlideSample, build_edge_condition

EDGE_CHANNELS = ("dist", "img", "oracle_corr")


def slide_condition_tensors(
    sample: SlideSample,
    edge_channels: tuple[str, ...] = ("dist", "img"),
    length_scale: float = 224.0,
    dtype=torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Visual condition [1, N, d_v] and edge condition [1, N, N, C] tensors.

    The optional "oracle_corr" channel exposes the slide's own spot-spot
    expression correlation (the oracle setting in the edge ablation).
    """
    bad = [c for c in edge_channels if c not in EDGE_CHANNELS]
    if bad:
        raise ContractError(f"unknown edge channels {bad}; valid: {EDGE_CHANNELS}")
    if not edge_channels:
        raise ContractError("at least one edge channel is required")
    ec = build_edge_condition(sample, sigma=length_scale)
    chans = []
    for name in edge_channels:
        if name == "dist":
            chans.append(ec.w[:, :, 0])
        elif name == "img":
            chans.append(ec.w[:, :, 1])
        else:
            corr = joint_mod.empirical_correlation(
                torch.as_tensor(sample.expr, dtype=torch.float64)
            ).numpy()
            chans.append(corr)
    ce = np.stack(chans, axis=-1)
    cv = torch.as_tensor(sample.visual, dtype=dtype).unsqueeze(0)
    return cv, torch.as_tensor(ce, dtype=dtype).unsqueeze(0)


class _DiffusionEstimatorBase(BaseEstimator):
    """Shared slide handling, training loop, and fitted-state checks."""

    mode = "base"

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted; call fit first")

    def _as_slides(self, x) -> list[SlideSample]:
        slides = [x] if isinstance(x, SlideSample) else list(x)
        if not slides:
            raise ContractError("need at least one slide")
        for s in slides:
            if not isinstance(s, SlideSample):
                raise ContractError(f"expected SlideSample, got {type(s).__name__}")
            if s.gene_names != slides[0].gene_names:
                raise ContractError("all slides must share one gene panel")
            if s.visual.shape[1] != slides[0].visual.shape[1]:
                raise ContractError("all slides must share the visual feature width")
        return slides

    def _backbone_config(self, d_visual: int) -> GraphBackboneConfig:
        cond_dim = self.cond_dim if self.cond_dim is not None else d_visual
        if cond_dim != d_visual:
            raise ContractError(
                f"cond_dim={cond_dim} but slides carry {d_visual}-d visual features"
            )
        return GraphBackboneConfig(
            hidden=self.backbone_hidden,
            layers=self.backbone_layers,
            heads=self.backbone_heads,
            cond_dim=cond_dim,
            edge_dim=len(self.edge_channels),
            alpha_init=self.backbone_alpha_init,
            gamma_init=self.backbone_gamma_init,
        )

    def _conditions(self, sample: SlideSample):
        return slide_condition_tensors(
            sample, tuple(self.edge_channels), self.edge_length_scale
        )

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.sigma_min, self.sigma_max)

    # subclasses implement _build(slides) -> None (sets model_/trainer_)
    # and _step(batch_index) -> loss report

    def prepare(self, slides, **kwargs):
        """Build model, trainer and cached per-slide tensors without training."""
        slides = self._as_slides(slides)
        torch.manual_seed(derive_seed(self.seed, "init"))
        self._build(slides, **kwargs)
        self.slides_ = slides
        self.gene_names_ = list(slides[0].gene_names)
        self.n_genes_ = slides[0].n_genes
        return self

    def train(self, n_steps: int, step_callback=None):
        self._check_fitted()
        order_rng = numpy_gen(derive_seed(self.seed, "order"))
        # replay slide choices up to the current step so resume matches a
        # fresh run's sequence
        for _ in range(self.trainer_.step_count):
            order_rng.integers(len(self.slides_))
        while self.trainer_.step_count < n_steps:
            idx = int(order_rng.integers(len(self.slides_)))
            report = self._step(idx)
            if step_callback is not None:
                step_callback(self.trainer_.step_count, report)
        return self

    def fit(self, X, y=None, step_callback=None, **kwargs):
        self.prepare(X, **kwargs)
        return self.train(self.train_steps, step_callback=step_callback)

    def score(self, X, y=None) -> float:
        """Mean per-gene PCC of the prediction against the slide's expression."""
        slides = self._as_slides(X)
        vals = [pcc_mse(self.predict(s), s.expr)[0] for s in slides]
        return float(np.mean(vals))


class FlagEstimator(_DiffusionEstimatorBase):
    """Graph-conditioned gene diffusion with optional embedding alignment."""

    mode = "flag"

    def __init__(
        self,
        sigma_min: float = 0.01,
        sigma_max: float = 10.0,
        backbone_hidden: int = 384,
        backbone_layers: int = 6,
        backbone_heads: int = 8,
        backbone_alpha_init: float = 0.1,
        backbone_gamma_init: float = 0.1,
        cond_dim: int | None = None,
        edge_channels: tuple[str, ...] = ("dist", "img"),
        edge_length_scale: float = 224.0,
        dit_hidden: int = 384,
        dit_layers: int = 12,
        dit_heads: int = 6,
        dit_mlp_ratio: float = 4.0,
        gene_dim: int = 512,
        align_layer: int = 8,
        lambda_align: float = 0.5,
        train_steps: int = 1000,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        grad_clip: float = 1.0,
        sample_steps: int = 100,
        seed: int = 0,
    ):
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.backbone_hidden = backbone_hidden
        self.backbone_layers = backbone_layers
        self.backbone_heads = backbone_heads
        self.backbone_alpha_init = backbone_alpha_init
        self.backbone_gamma_init = backbone_gamma_init
        self.cond_dim = cond_dim
        self.edge_channels = edge_channels
        self.edge_length_scale = edge_length_scale
        self.dit_hidden = dit_hidden
        self.dit_layers = dit_layers
        self.dit_heads = dit_heads
        self.dit_mlp_ratio = dit_mlp_ratio
        self.gene_dim = gene_dim
        self.align_layer = align_layer
        self.lambda_align = lambda_align
        self.train_steps = train_steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.sample_steps = sample_steps
        self.seed = seed

    def _dit_config(self) -> DiTConfig:
        return DiTConfig(
            hidden=self.dit_hidden, layers=self.dit_layers, heads=self.dit_heads,
            mlp_ratio=self.dit_mlp_ratio, gene_dim=self.gene_dim,
            align_layer=self.align_layer,
        )

    def _build(self, slides, embeddings: GFMEmbeddings | None = None):
        n_genes = slides[0].n_genes
        d_v = slides[0].visual.shape[1]
        if embeddings is not None and embeddings.F.shape[0] != n_genes:
            raise ContractError(
                f"embeddings cover {embeddings.F.shape[0]} genes, slides have {n_genes}"
            )
        embed_dim = embeddings.dim if embeddings is not None else None
        self.model_ = FlagModel(
            self._backbone_config(d_v), self._dit_config(), n_genes,
            embed_dim=embed_dim, schedule=self.schedule(),
        )
        self.trainer_ = FlagTrainer(
            self.model_, self.schedule(), embeddings=embeddings,
            lambda_align=self.lambda_align if embeddings is not None else 0.0,
            lr=self.lr, weight_decay=self.weight_decay,
            grad_clip=self.grad_clip, seed=derive_seed(self.seed, "train"),
        )
        self._cache_ = [
            (torch.as_tensor(s.expr, dtype=torch.float32).unsqueeze(0),
             *self._conditions(s))
            for s in slides
        ]

    def _step(self, idx: int):
        x0, cv, ce = self._cache_[idx]
        return self.trainer_.train_step(x0, cv, ce)

    def fit(self, X, y=None, embeddings: GFMEmbeddings | None = None, step_callback=None):
        self.prepare(X, embeddings=embeddings)
        return self.train(self.train_steps, step_callback=step_callback)

    def predict(self, slide: SlideSample, seed: int | None = None,
                steps: int | None = None) -> np.ndarray:
        self._check_fitted()
        if slide.n_genes != self.n_genes_:
            raise ContractError("slide gene panel does not match the fitted model")
        cv, ce = self._conditions(slide)
        self.model_.eval()
        out = flag_mod.flag_sample(
            self.model_, cv, ce, self.schedule(),
            steps=steps if steps is not None else self.sample_steps,
            seed=seed if seed is not None else derive_seed(self.seed, "sample"),
        )
        self.model_.train()
        return out


class JointDiffusionEstimator(_DiffusionEstimatorBase):
    """Joint node-edge diffusion over expression and functional edges."""

    mode = "joint"

    def __init__(
        self,
        sigma_min: float = 0.01,
        sigma_max: float = 10.0,
        backbone_hidden: int = 384,
        backbone_layers: int = 6,
        backbone_heads: int = 8,
        backbone_alpha_init: float = 0.1,
        backbone_gamma_init: float = 0.1,
        cond_dim: int | None = None,
        edge_channels: tuple[str, ...] = ("dist", "img"),
        edge_length_scale: float = 224.0,
        lambda_c: float = 1.0,
        train_steps: int = 1000,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        grad_clip: float = 1.0,
        sample_steps: int = 100,
        seed: int = 0,
    ):
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.backbone_hidden = backbone_hidden
        self.backbone_layers = backbone_layers
        self.backbone_heads = backbone_heads
        self.backbone_alpha_init = backbone_alpha_init
        self.backbone_gamma_init = backbone_gamma_init
        self.cond_dim = cond_dim
        self.edge_channels = edge_channels
        self.edge_length_scale = edge_length_scale
        self.lambda_c = lambda_c
        self.train_steps = train_steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.sample_steps = sample_steps
        self.seed = seed

    def _build(self, slides):
        self.model_ = JointScoreModel(
            self._backbone_config(slides[0].visual.shape[1]), slides[0].n_genes,
            schedule=self.schedule(),
        )
        self.trainer_ = JointTrainer(
            self.model_, self.schedule(), lambda_c=self.lambda_c,
            lr=self.lr, weight_decay=self.weight_decay,
            grad_clip=self.grad_clip, seed=derive_seed(self.seed, "train"),
        )
        self._cache_ = []
        for s in slides:
            x0 = torch.as_tensor(s.expr, dtype=torch.float32).unsqueeze(0)
            a0 = joint_mod.empirical_correlation(x0)
            self._cache_.append((x0, a0, *self._conditions(s)))

    def _step(self, idx: int):
        x0, a0, cv, ce = self._cache_[idx]
        return self.trainer_.train_step(x0, a0, cv, ce)

    def predict_graph(self, slide: SlideSample, seed: int | None = None,
                      steps: int | None = None):
        """Sampled (expression, symmetrized edges, asymmetry diagnostic)."""
        self._check_fitted()
        if slide.n_genes != self.n_genes_:
            raise ContractError("slide gene panel does not match the fitted model")
        cv, ce = self._conditions(slide)
        self.model_.eval()
        state = joint_mod.joint_sample(
            self.model_, cv, ce, self.schedule(),
            steps=steps if steps is not None else self.sample_steps,
            seed=seed if seed is not None else derive_seed(self.seed, "sample"),
            n_genes=self.n_genes_,
        )
        self.model_.train()
        a_sym, asym = symmetrize_edges(state.At)
        return state.Xt, a_sym, asym

    def predict(self, slide: SlideSample, seed: int | None = None,
                steps: int | None = None) -> np.ndarray:
        return self.predict_graph(slide, seed=seed, steps=steps)[0]


class NodeOnlyEstimator(_DiffusionEstimatorBase):
    """Node-only graph diffusion: fixed topology, expression stream only."""

    mode = "node_only"

    def __init__(
        self,
        sigma_min: float = 0.01,
        sigma_max: float = 10.0,
        backbone_hidden: int = 384,
        backbone_layers: int = 6,
        backbone_heads: int = 8,
        backbone_alpha_init: float = 0.1,
        backbone_gamma_init: float = 0.1,
        cond_dim: int | None = None,
        edge_channels: tuple[str, ...] = ("dist", "img"),
        edge_length_scale: float = 224.0,
        train_steps: int = 1000,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        grad_clip: float = 1.0,
        sample_steps: int = 100,
        seed: int = 0,
    ):
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.backbone_hidden = backbone_hidden
        self.backbone_layers = backbone_layers
        self.backbone_heads = backbone_heads
        self.backbone_alpha_init = backbone_alpha_init
        self.backbone_gamma_init = backbone_gamma_init
        self.cond_dim = cond_dim
        self.edge_channels = edge_channels
        self.edge_length_scale = edge_length_scale
        self.train_steps = train_steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.sample_steps = sample_steps
        self.seed = seed

    def _build(self, slides):
        self.model_ = NodeOnlyScoreModel(
            self._backbone_config(slides[0].visual.shape[1]), slides[0].n_genes,
            schedule=self.schedule(),
        )
        self.trainer_ = NodeOnlyTrainer(
            self.model_, self.schedule(), lr=self.lr,
            weight_decay=self.weight_decay, grad_clip=self.grad_clip,
            seed=derive_seed(self.seed, "train"),
        )
        self._cache_ = [
            (torch.as_tensor(s.expr, dtype=torch.float32).unsqueeze(0),
             *self._conditions(s))
            for s in slides
        ]

    def _step(self, idx: int):
        x0, cv, ce = self._cache_[idx]
        return self.trainer_.train_step(x0, cv, ce)

    def predict(self, slide: SlideSample, seed: int | None = None,
                steps: int | None = None) -> np.ndarray:
        self._check_fitted()
        if slide.n_genes != self.n_genes_:
            raise ContractError("slide gene panel does not match the fitted model")
        cv, ce = self._conditions(slide)
        self.model_.eval()
        out = joint_mod.node_only_sample(
            self.model_, cv, ce, self.schedule(),
            steps=steps if steps is not None else self.sample_steps,
            seed=seed if seed is not None else derive_seed(self.seed, "sample"),
            n_genes=self.n_genes_,
        )
        self.model_.train()
        return out
