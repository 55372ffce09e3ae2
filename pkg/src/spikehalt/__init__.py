"""Spiking transformer with two-dimensional token halting, trainable on a CPU with numpy."""
from .data import Dataset, gen_synthetic, load_cifar10_binary, load_cifar100_binary, make_batches
from .energy import OpCount, count_ops, estimate_energy
from .errors import ConfigError, DataFormatError, DimensionError, NumericError, SequencingError
from .estimator import SpikeHaltClassifier
from .halting import HaltTrace, halt_index, halting_probabilities, remainder, scan
from .loss import cross_entropy, mean_field_logits, ponder_loss
from .model import ModelConfig, SpikeHaltNet, load_checkpoint, predict, save_checkpoint, set_epsilon
from .train import TrainConfig, evaluate, objective, train_phase

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataFormatError", "Dataset", "DimensionError", "HaltTrace", "ModelConfig",
    "NumericError", "OpCount", "SequencingError", "SpikeHaltClassifier", "SpikeHaltNet",
    "TrainConfig", "count_ops", "cross_entropy", "estimate_energy", "evaluate", "gen_synthetic",
    "halt_index", "halting_probabilities", "load_checkpoint", "load_cifar100_binary",
    "load_cifar10_binary", "make_batches", "mean_field_logits", "ponder_loss", "predict",
    "objective", "remainder", "save_checkpoint", "scan", "set_epsilon", "train_phase",
]
