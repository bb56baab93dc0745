"""Multimodal (RGB, depth, audio) failure detection and classification for robot manipulation."""

from .data_model import DatasetIndex, Episode, Label, ActionName, load_episode, make_splits, scan_dataset
from .network import FinoNet, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, train
from .metrics import MetricsReport, compute_metrics

__version__ = "0.1.0"
