"""Desk-scale SGD trainer exercising the composite loss."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..analysis import ActivationTrace, gradient_stats
from ..errors import NumericError
from ..graph import Model
from ..serialize import WeightSet
from .data import Sample, as_arrays, split_dataset
from .loss import LossConfig, beta_schedule, k_schedule, per_sample_errors
from .network import Executor, backward, capture_into

CURVE_COLUMNS = ("epoch", "train_mse", "val_mse", "train_bce", "val_bce", "beta", "k")


@dataclass
class TrainCurves:
    rows: list[dict] = field(default_factory=list)
    grad_series: dict[str, list[float]] = field(default_factory=dict)

    def column(self, name: str) -> list[float]:
        return [row[name] for row in self.rows]

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for row in self.rows:
            writer.writerow([row["epoch"], *(repr(float(row[c])) for c in CURVE_COLUMNS[1:6]), row["k"]])
        return out.getvalue()


@dataclass
class TrainResult:
    curves: TrainCurves
    weights: WeightSet
    val_trace: ActivationTrace
    grad_stats: dict[str, dict]


def evaluate(model: Model, weights, samples: list[Sample], batch_size: int = 64) -> dict[str, float]:
    """Plain (un-mined) mean MSE and BCE over ``samples``."""
    executor = Executor(model, weights)
    images, steer, coll = as_arrays(samples)
    sq_all, bce_all = [], []
    for start in range(0, len(samples), batch_size):
        state = executor.run(images[start:start + batch_size])
        sq, bce = per_sample_errors(state.steering, state.prob, steer[start:start + batch_size],
                                    coll[start:start + batch_size])
        sq_all.append(sq)
        bce_all.append(bce)
    return {"mse": float(np.concatenate(sq_all).mean()), "bce": float(np.concatenate(bce_all).mean())}


def collect_trace(model: Model, weights, samples: list[Sample], batch_size: int = 64) -> ActivationTrace:
    executor = Executor(model, weights)
    images = as_arrays(samples)[0]
    trace = ActivationTrace()
    for start in range(0, len(samples), batch_size):
        capture_into(trace, model, executor.run(images[start:start + batch_size]))
    return trace


def train_toy(
    model: Model,
    weights_init: WeightSet,
    dataset: list[Sample],
    cfg: LossConfig,
    epochs: Optional[int] = None,
    lr: float = 1e-2,
    seed: int = 0,
    batch_size: int = 32,
    grad_window: int = 10,
) -> TrainResult:
    """Plain SGD with a fixed learning rate on a seeded 90/10 split.

    Mini-batches are visited in a seeded order and reduced in order, so a
    run is bit-reproducible on one thread.
    """
    epochs = epochs or cfg.total_epochs
    if cfg.total_epochs != epochs:
        cfg = replace(cfg, total_epochs=epochs)
    train, val = split_dataset(dataset, seed)
    images, steer, coll = as_arrays(train)
    params = {name: np.array(arr, dtype=np.float32) for name, arr in weights_init.items()}
    layer_ids = [layer.id for layer in model.parametric_layers()]
    curves = TrainCurves(grad_series={layer_id: [] for layer_id in layer_ids})
    rng = np.random.default_rng(seed)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        grad_sums = dict.fromkeys(layer_ids, 0.0)
        n_batches = 0
        for start in range(0, len(train), batch_size):
            idx = np.sort(order[start:start + batch_size])
            result = backward(model, params, (images[idx], steer[idx], coll[idx]), epoch, cfg)
            for name, grad in result.gradients.items():
                params[name] = (params[name] - lr * grad).astype(np.float32)
            for layer_id, value in result.per_layer_mean_abs_grad.items():
                grad_sums[layer_id] += value
            n_batches += 1
        if not all(np.all(np.isfinite(p)) for p in params.values()):
            raise NumericError(f"training diverged at epoch {epoch}", epoch)
        tr, va = evaluate(model, params, train), evaluate(model, params, val)
        if not all(np.isfinite(v) for v in (*tr.values(), *va.values())):
            raise NumericError(f"non-finite loss at epoch {epoch}", epoch)
        curves.rows.append({
            "epoch": epoch, "train_mse": tr["mse"], "val_mse": va["mse"],
            "train_bce": tr["bce"], "val_bce": va["bce"],
            "beta": beta_schedule(epoch, cfg), "k": k_schedule(min(batch_size, len(train)), epoch, cfg),
        })
        for layer_id in layer_ids:
            curves.grad_series[layer_id].append(grad_sums[layer_id] / n_batches)
    weights = WeightSet(params)
    window = min(grad_window, epochs)
    stats = {layer_id: gradient_stats(series, window) for layer_id, series in curves.grad_series.items()}
    return TrainResult(curves, weights, collect_trace(model, weights, val), stats)
