"""Mixture-of-experts similarity VAE for deep clustering and per-mode generation."""

__version__ = "0.1.0"

from .config import DataConfig, ModelConfig, SimilarityConfig, TrainConfig  # noqa: E402
from .data import Dataset, load_csv, load_dataset, load_idx, make_blobs  # noqa: E402
from .metrics import clustering_accuracy, f_measure, mmd2_unbiased, nmi  # noqa: E402
from .model import MoESimVAE  # noqa: E402
from .trainer import evaluate, fit, generation_ablation  # noqa: E402

__all__ = [
    "DataConfig", "ModelConfig", "SimilarityConfig", "TrainConfig",
    "Dataset", "load_csv", "load_dataset", "load_idx", "make_blobs",
    "clustering_accuracy", "f_measure", "mmd2_unbiased", "nmi",
    "MoESimVAE", "evaluate", "fit", "generation_ablation",
]
