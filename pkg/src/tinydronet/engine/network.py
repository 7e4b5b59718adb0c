"""Reference execution of a layer graph: forward, capture and backward."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..analysis import ActivationTrace
from ..errors import ModelError, NumericError
from ..graph import ADD, CONV, FC, FLATTEN, INPUT, MAXPOOL, RELU, SIGMOID, Model
from ..serialize import WeightSet, check_weights, expected_weight_dims, weight_names
from . import ops
from .loss import LossConfig, loss


def init_weights(model: Model, seed: int = 0) -> WeightSet:
    """Uniform in +-sqrt(1/fan_in) for kernels and biases alike."""
    rng = np.random.default_rng(seed)
    entries = {}
    dims = expected_weight_dims(model)
    for layer in model.parametric_layers():
        w_name, b_name = weight_names(layer.id)
        fan_in = int(np.prod(dims[w_name][1:]))
        bound = np.sqrt(1.0 / fan_in)
        entries[w_name] = rng.uniform(-bound, bound, dims[w_name]).astype(np.float32)
        entries[b_name] = rng.uniform(-bound, bound, dims[b_name]).astype(np.float32)
    return WeightSet(entries)


def zero_weights(model: Model) -> WeightSet:
    return WeightSet({name: np.zeros(dims, np.float32) for name, dims in expected_weight_dims(model).items()})


def trace_layers(model: Model) -> list[str]:
    """Every ReLU output plus every conv output feeding an Add directly (by-passes)."""
    out = []
    for layer in model.layers:
        if layer.kind == RELU:
            out.append(layer.id)
        elif layer.kind == CONV and any(model[c].kind == ADD for c in model.consumers[layer.id]):
            out.append(layer.id)
    return out


def _check_outputs(model: Model) -> tuple[str, str]:
    outputs = model.outputs
    if len(outputs) != 2:
        raise ModelError(f"model must have exactly 2 outputs (steering, collision), found {outputs}")
    for layer_id in outputs:
        if model.inferred_shapes[layer_id].elements != 1:
            raise ModelError(f"output {layer_id!r} must be a single scalar")
    return outputs[0], outputs[1]


def _as_batch(images, dtype) -> np.ndarray:
    x = np.asarray(images, dtype=dtype)
    return x[None] if x.ndim == 3 else x


@dataclass
class ForwardState:
    values: dict        # layer id -> output array (N, C, H, W) or (N, F)
    caches: dict        # per-layer data the backward pass needs
    steering: np.ndarray
    prob: np.ndarray


class Executor:
    """Runs one model with one weight set; ``dtype`` is the storage precision."""

    def __init__(self, model: Model, weights: WeightSet | dict, dtype=np.float32, validate: bool = True):
        if validate:
            check_weights(model, weights if isinstance(weights, WeightSet) else WeightSet(weights))
        self.model = model
        self.dtype = np.dtype(dtype)
        self.params = {name: np.asarray(weights[name], dtype=self.dtype) for name in weights}
        self.steer_id, self.coll_id = _check_outputs(model)
        self.order = model.order

    def run(self, images) -> ForwardState:
        model, p = self.model, self.params
        x = _as_batch(images, self.dtype)
        expected = tuple(model.input_shape.as_list())
        if x.shape[1:] != expected:
            raise ModelError(f"input shape {x.shape[1:]} does not match model input {expected}")
        values, caches = {}, {}
        for layer_id in self.order:
            layer = model[layer_id]
            srcs = [values[i] for i in layer.inputs]
            kind = layer.kind
            if kind == INPUT:
                out = x
            elif kind == CONV:
                w, b = (p[n] for n in weight_names(layer_id))
                out, caches[layer_id] = ops.conv2d(srcs[0], w, b, layer.stride, layer.padding)
            elif kind == MAXPOOL:
                out, caches[layer_id] = ops.maxpool(srcs[0], layer.kernel, layer.stride, layer.padding)
            elif kind == RELU:
                out = ops.relu(srcs[0])
            elif kind == ADD:
                out = (srcs[0].astype(np.float64) + srcs[1]).astype(self.dtype)
            elif kind == FLATTEN:
                out = srcs[0].reshape(srcs[0].shape[0], -1)
            elif kind == FC:
                w, b = (p[n] for n in weight_names(layer_id))
                src = srcs[0].reshape(srcs[0].shape[0], -1)
                out = ops.fully_connected(src, w, b)
            elif kind == SIGMOID:
                out = ops.sigmoid(srcs[0])
            else:  # pragma: no cover - guarded by LayerSpec validation
                raise ModelError(f"unsupported layer kind {kind}")
            values[layer_id] = out
        steering = values[self.steer_id].reshape(-1).astype(np.float64)
        prob = values[self.coll_id].reshape(-1).astype(np.float64)
        return ForwardState(values, caches, steering, prob)

    def backward(self, state: ForwardState, d_steering, d_prob) -> dict[str, np.ndarray]:
        """Gradients of sum(d_steering*steering + d_prob*prob) w.r.t. every tensor."""
        model, p = self.model, self.params
        grads: dict[str, np.ndarray] = {}
        n = state.steering.size
        upstream = {
            self.steer_id: np.asarray(d_steering, np.float64).reshape(n, 1).astype(self.dtype),
            self.coll_id: np.asarray(d_prob, np.float64).reshape(n, 1).astype(self.dtype),
        }

        def push(src, g):
            upstream[src] = g if src not in upstream else (upstream[src].astype(np.float64) + g).astype(self.dtype)

        for layer_id in reversed(self.order):
            layer = model[layer_id]
            if layer_id not in upstream or layer.kind == INPUT:
                continue
            dy = upstream.pop(layer_id)
            kind = layer.kind
            src_vals = [state.values[i] for i in layer.inputs]
            if kind == CONV:
                w_name, b_name = weight_names(layer_id)
                dx, grads[w_name], grads[b_name] = ops.conv2d_backward(
                    dy, src_vals[0].shape, state.caches[layer_id], p[w_name], layer.stride, layer.padding)
                push(layer.inputs[0], dx)
            elif kind == MAXPOOL:
                push(layer.inputs[0], ops.maxpool_backward(
                    dy, src_vals[0].shape, state.caches[layer_id], layer.kernel, layer.stride, layer.padding))
            elif kind == RELU:
                push(layer.inputs[0], ops.relu_backward(dy, src_vals[0]))
            elif kind == ADD:
                push(layer.inputs[0], dy)
                push(layer.inputs[1], dy)
            elif kind == FLATTEN:
                push(layer.inputs[0], dy.reshape(src_vals[0].shape))
            elif kind == FC:
                w_name, b_name = weight_names(layer_id)
                flat = src_vals[0].reshape(src_vals[0].shape[0], -1)
                dx, grads[w_name], grads[b_name] = ops.fully_connected_backward(dy, flat, p[w_name])
                push(layer.inputs[0], dx.reshape(src_vals[0].shape))
            elif kind == SIGMOID:
                push(layer.inputs[0], ops.sigmoid_backward(dy, state.values[layer_id]))
        for name in self.params:
            grads.setdefault(name, np.zeros_like(self.params[name]))
        return {name: grads[name] for name in self.params}


def forward(model: Model, weights, image, capture: bool = False, trace: Optional[ActivationTrace] = None,
            dtype=np.float32) -> dict:
    """Predict steering and collision probability for one image or a batch.

    With ``capture`` the per-channel positive counts of every ReLU and
    by-pass output are accumulated into ``trace`` (created if not given).
    """
    executor = Executor(model, weights, dtype)
    single = np.asarray(image).ndim == 3
    state = executor.run(image)
    prob = np.clip(state.prob, ops.PROB_EPS, 1 - ops.PROB_EPS)
    result = {
        "steering": float(state.steering[0]) if single else state.steering,
        "collision_prob": float(prob[0]) if single else prob,
    }
    if capture:
        trace = trace if trace is not None else ActivationTrace()
        capture_into(trace, model, state)
        result["trace"] = trace
    return result


def capture_into(trace: ActivationTrace, model: Model, state: ForwardState) -> None:
    for layer_id in trace_layers(model):
        trace.accumulate(layer_id, state.values[layer_id])


@dataclass
class BackwardResult:
    gradients: dict[str, np.ndarray]
    per_layer_mean_abs_grad: dict[str, float]
    loss: object


def backward(model: Model, weights, batch, epoch: int, cfg: LossConfig, dtype=np.float32,
             k: Optional[int] = None, selected=None) -> BackwardResult:
    """Reverse-mode gradients of the composite loss over ``batch``.

    ``batch`` is ``(images, steering_targets, collision_targets)``.  The
    hard-mined subsets are constants of the differentiation.
    """
    images, steer_t, coll_t = batch
    executor = Executor(model, weights, dtype)
    state = executor.run(images)
    result = loss(state.steering, state.prob, steer_t, coll_t, epoch, cfg, k=k, selected=selected)
    if not np.isfinite(result.total):
        raise NumericError(f"non-finite loss at epoch {epoch}", epoch)
    grads = executor.backward(state, result.d_steering, result.d_prob)
    mean_abs = {
        layer.id: float(np.abs(grads[weight_names(layer.id)[0]].astype(np.float64)).mean())
        for layer in model.parametric_layers()
    }
    return BackwardResult(grads, mean_abs, result)
