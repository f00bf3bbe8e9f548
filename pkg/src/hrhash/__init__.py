"""Deep supervised hashing with a multi-resolution convolutional backbone."""

from .backbone import BackboneConfig, build_backbone, count_parameters
from .core import HashCode, Sample, SplitSpec, pack, similarity, similarity_matrix, unpack
from .evaluation import average_precision_at_k, evaluate, mean_average_precision
from .head import HashHeadConfig, binarize, quantization_error
from .losses import LossConfig, PairwiseBatch, loss_gradient, make_loss, pairwise_loss, relaxed_hamming, total_loss
from .retrieval import RetrievalDatabase, hamming_distance, load_db, save_db, search
from .trainer import TrainConfig, encode_dataset, train

__all__ = [
    "BackboneConfig", "build_backbone", "count_parameters",
    "HashCode", "Sample", "SplitSpec", "pack", "similarity", "similarity_matrix", "unpack",
    "average_precision_at_k", "evaluate", "mean_average_precision",
    "HashHeadConfig", "binarize", "quantization_error",
    "LossConfig", "PairwiseBatch", "loss_gradient", "make_loss", "pairwise_loss", "relaxed_hamming", "total_loss",
    "RetrievalDatabase", "hamming_distance", "load_db", "save_db", "search",
    "TrainConfig", "encode_dataset", "train",
]
