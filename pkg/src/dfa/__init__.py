"""Dynamic feature alignment for semi-supervised domain adaptation."""
from .config import ExperimentConfig, load_config
from .datasets import ShiftSpec, SSDAEpisode, make_synthetic_episode
from .estimator import DFAClassifier
from .trainer import evaluate, train

__all__ = ["DFAClassifier", "ExperimentConfig", "SSDAEpisode", "ShiftSpec", "evaluate",
           "load_config", "make_synthetic_episode", "train"]
__version__ = "0.1.0"
