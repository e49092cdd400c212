"""Multi-slide pathology MIL: patch selection, graph and text fusion, training and evaluation."""

__version__ = "0.1.0"

from .ablation import AblationPlan, AblationReport, run_ablation
from .bagio import (DatasetManifest, PatchBag, SyntheticSpec, TextBank, generate_synthetic,
                    load_manifest, load_text_bank, read_bag, write_bag)
from .fusion import FusionConfig, FusionModel, FusionTrace, knn_graph
from .gradsuite import run_grad_suite
from .metrics import MetricsReport, acc_f1, evaluate_scores, pr_auc, roc_auc
from .selection import SelectorParams, select_patches, two_dim_compress
from .training import TrainConfig, TrainResult, evaluate, train

__all__ = [
    "AblationPlan", "AblationReport", "run_ablation",
    "DatasetManifest", "PatchBag", "SyntheticSpec", "TextBank", "generate_synthetic",
    "load_manifest", "load_text_bank", "read_bag", "write_bag",
    "FusionConfig", "FusionModel", "FusionTrace", "knn_graph", "run_grad_suite",
    "MetricsReport", "acc_f1", "evaluate_scores", "pr_auc", "roc_auc",
    "SelectorParams", "select_patches", "two_dim_compress",
    "TrainConfig", "TrainResult", "evaluate", "train",
]
