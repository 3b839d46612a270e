"""TinySiamese: a small Siamese verification head for precomputed feature vectors."""

from .data import Dataset, FeatureRecord, Pair, PairBatch, generate_synthetic, load_dataset, sample_balanced_batch, save_dataset
from .evaluation import classify_gallery_probe, evaluate_verification, sweep_thresholds
from .model import TinyModel, distance_vector, embed, init_model, load_model, save_model, score_pair
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FeatureRecord",
    "Pair",
    "PairBatch",
    "TinyModel",
    "TrainConfig",
    "classify_gallery_probe",
    "distance_vector",
    "embed",
    "evaluate_verification",
    "generate_synthetic",
    "init_model",
    "load_dataset",
    "load_model",
    "sample_balanced_batch",
    "save_dataset",
    "save_model",
    "score_pair",
    "sweep_thresholds",
    "train",
]
