"""Classification of scarcely observed multivariate trajectories with a
generative recurrent latent-state model, trained by backpropagation through
time over a small define-by-run graph and deployed as a performance-ranked
ensemble."""

from .data import (BinningSpec, LongRecord, NormStats, TensorDataset,
                   compute_norm_stats, fill_rate, ingest_long_csv, normalize,
                   split, tensorize)
from .ensemble import (EnsembleModel, EnsembleSpec, ensemble_curve,
                       ensemble_predict, run_ensemble, sample_hparams)
from .evaluate import MetricsReport, RocCurve, auc_pairwise, report, roc
from .model import (ARCH_BASELINE, ARCH_GENERATIVE, HyperParams, TrainedModel,
                    forward, forward_baseline, loss, predict, train)
from .ndiff import Node, ParamStore, backward, grad_check
from .synthgen import GroundTruth, SynthConfig, oracle_scores, sample_dataset

__version__ = "0.1.0"

__all__ = [
    "ARCH_BASELINE", "ARCH_GENERATIVE", "BinningSpec", "EnsembleModel",
    "EnsembleSpec", "GroundTruth", "HyperParams", "LongRecord",
    "MetricsReport", "Node", "NormStats", "ParamStore", "RocCurve",
    "SynthConfig", "TensorDataset", "TrainedModel", "auc_pairwise",
    "backward", "compute_norm_stats", "ensemble_curve", "ensemble_predict",
    "fill_rate", "forward", "forward_baseline", "grad_check",
    "ingest_long_csv", "loss", "normalize", "oracle_scores", "predict",
    "report", "roc", "run_ensemble", "sample_dataset", "sample_hparams",
    "split", "tensorize", "train",
]
