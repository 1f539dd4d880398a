"""flaglab: structure-aware spatial gene-expression generation lab."""

from .backbone import GraphBackbone, GraphBackboneConfig
from .data import GenePanel, SyntheticSpec, hmhvg_select, log1p_normalize, synth_slide
from .errors import (ConfigError, ConstructionError, ContractError,
                     FileFormatError, FlagLabError, SamplerDivergenceError,
                     TrainingError, UndefinedMetricError)
from .estimators import FlagEstimator, JointDiffusionEstimator, NodeOnlyEstimator
from .flag import DiTConfig, FlagModel, GFMEmbeddings, align_loss, flag_sample
from .joint import (GraphState, JointScoreModel, empirical_correlation,
                    joint_sample, symmetrize_edges)
from .metrics import (MetricsReport, deg_overlap, evaluate, gene_corr_matrix,
                      gsc, morans_i, pcc_mse, ssc)
from .sde import (DiffusionBatch, NoiseSchedule, dsm_loss, eps_dsm_loss,
                  heun_integrate, perturb, true_perturbation_score,
                  tweedie_denoise)
from .spatial_graph import (EdgeCondition, SlideSample, SpatialWeightGraph,
                            build_edge_condition, build_knn_graph)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ConstructionError", "ContractError", "DiTConfig",
    "DiffusionBatch", "EdgeCondition", "FileFormatError", "FlagEstimator",
    "FlagLabError", "FlagModel", "GFMEmbeddings", "GenePanel",
    "GraphBackbone", "GraphBackboneConfig", "GraphState",
    "JointDiffusionEstimator", "JointScoreModel", "MetricsReport",
    "NodeOnlyEstimator", "NoiseSchedule", "SamplerDivergenceError",
    "SlideSample", "SpatialWeightGraph", "SyntheticSpec", "TrainingError",
    "UndefinedMetricError", "align_loss", "build_edge_condition",
    "build_knn_graph", "deg_overlap", "dsm_loss", "empirical_correlation",
    "eps_dsm_loss", "evaluate", "flag_sample", "gene_corr_matrix", "gsc",
    "heun_integrate", "hmhvg_select", "joint_sample", "log1p_normalize",
    "morans_i", "pcc_mse", "perturb", "ssc", "symmetrize_edges",
    "synth_slide", "true_perturbation_score", "tweedie_denoise",
]
