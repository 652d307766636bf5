"""Query CPU-time regression with a sub-tree sampled tree convolution network."""

from .artifact import load_model, save_model
from .evaluation import (
    TargetTransform,
    fit_transform,
    footprint_report,
    log_binning_fit,
    log_binning_predict,
    mse_minutes,
    provisioning_report,
    split_workload,
)
from .otp import Vocab, build_otp_tree, build_vocabularies
from .plan_ir import (
    PlanNode,
    QueryTrace,
    SynthConfig,
    Workload,
    generate_synthetic_workload,
    parse_predicate_text,
    parse_workload,
    plan_stats,
    workload_distribution,
)
from .predicate_embedding import EmbeddingModel, build_corpus, finalize_embedding, train_word2vec
from .sampler import SamplerConfig, sample_subtrees, select_top_k
from .training import PrestroidModel, TrainConfig, predict, train_model
from .tree_cnn import ArchConfig, ModelParams

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "EmbeddingModel", "ModelParams", "PlanNode", "PrestroidModel", "QueryTrace",
    "SamplerConfig", "SynthConfig", "TargetTransform", "TrainConfig", "Vocab", "Workload",
    "build_corpus", "build_otp_tree", "build_vocabularies", "finalize_embedding", "fit_transform",
    "footprint_report", "generate_synthetic_workload", "load_model", "log_binning_fit",
    "log_binning_predict", "mse_minutes", "parse_predicate_text", "parse_workload", "plan_stats",
    "predict", "provisioning_report", "sample_subtrees", "save_model", "select_top_k",
    "split_workload", "train_model", "train_word2vec", "workload_distribution",
]
