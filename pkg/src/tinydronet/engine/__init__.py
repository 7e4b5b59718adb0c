"""Float reference engine: primitives, executor, loss, trainer."""

from .data import Sample, load_dataset, save_dataset, split_dataset, synth_dataset
from .loss import HardMining, LossConfig, beta_schedule, hard_mine_topk, k_schedule, loss
from .network import Executor, backward, forward, init_weights, trace_layers, zero_weights
from .quant import quantize_tensor, quantize_weights
from .train import TrainCurves, TrainResult, train_toy

__all__ = [
    "Executor", "HardMining", "LossConfig", "Sample", "TrainCurves", "TrainResult",
    "backward", "beta_schedule", "forward", "hard_mine_topk", "init_weights", "k_schedule",
    "load_dataset", "loss", "quantize_tensor", "quantize_weights", "save_dataset",
    "split_dataset", "synth_dataset", "trace_layers", "train_toy", "zero_weights",
]
