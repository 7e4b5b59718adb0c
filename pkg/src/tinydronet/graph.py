"""Layer-graph representation and shape inference."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional

from .errors import ModelError, ShapeError

INPUT = "Input"
CONV = "Conv2d"
MAXPOOL = "MaxPool"
RELU = "ReLU"
ADD = "Add"
FLATTEN = "Flatten"
FC = "FullyConnected"
SIGMOID = "Sigmoid"

KINDS = (INPUT, CONV, MAXPOOL, RELU, ADD, FLATTEN, FC, SIGMOID)
PARAMETRIC = (CONV, FC)
# Layers whose output shares storage with their first input.
ALIASING = (RELU, ADD, FLATTEN, SIGMOID)


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ShapeError(f"{name} must be a positive integer, got {value!r}")

    @property
    def elements(self) -> int:
        return self.channels * self.height * self.width

    def nbytes(self, bytes_per_element: int = 1) -> int:
        return self.elements * bytes_per_element

    def as_list(self) -> list[int]:
        return [self.channels, self.height, self.width]

    def __str__(self):
        return f"{self.height}x{self.width}x{self.channels}"


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    out_channels: int = 0
    group: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if not self.id:
            raise ModelError("layer id must be non-empty")
        if self.kind not in KINDS:
            raise ModelError(f"layer {self.id!r}: unknown kind {self.kind!r}")
        arity = {INPUT: 0, ADD: 2}.get(self.kind, 1)
        if len(self.inputs) != arity:
            raise ModelError(
                f"layer {self.id!r}: {self.kind} takes {arity} input(s), got {len(self.inputs)}"
            )
        if self.kind == CONV and self.kernel not in (1, 3, 5):
            raise ModelError(f"layer {self.id!r}: conv kernel must be 1, 3 or 5")
        if self.kind == MAXPOOL and self.kernel < 1:
            raise ModelError(f"layer {self.id!r}: pool kernel must be positive")
        if self.kind in (CONV, MAXPOOL):
            if self.stride not in (1, 2):
                raise ModelError(f"layer {self.id!r}: stride must be 1 or 2")
            if self.padding < 0:
                raise ModelError(f"layer {self.id!r}: negative padding")
        if self.kind in PARAMETRIC and self.out_channels < 1:
            raise ModelError(f"layer {self.id!r}: out_channels must be positive")

    @property
    def has_weights(self) -> bool:
        return self.kind in PARAMETRIC


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class Model:
    """An ordered list of layers forming a DAG with a single Input.

    ``family_config`` is set for members of the Dronet family and ``None``
    for arbitrary graphs.  Shapes are inferred lazily so that malformed
    graphs can still be constructed and reported on.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: TensorShape
    family_config: Optional[object] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ModelError(f"duplicate layer ids: {dupes}")
        known = set(ids)
        for layer in self.layers:
            for src in layer.inputs:
                if src not in known:
                    raise ModelError(f"layer {layer.id!r} references unknown input {src!r}")
        n_inputs = sum(layer.kind == INPUT for layer in self.layers)
        if n_inputs != 1:
            raise ModelError(f"model must have exactly one Input layer, found {n_inputs}")

    def __getitem__(self, layer_id: str) -> LayerSpec:
        return self._by_id[layer_id]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._by_id

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.layers == other.layers
            and self.input_shape == other.input_shape
            and self.family_config == other.family_config
        )

    def __hash__(self):
        return hash((self.layers, self.input_shape, self.family_config))

    @cached_property
    def _by_id(self) -> dict[str, LayerSpec]:
        return {layer.id: layer for layer in self.layers}

    @cached_property
    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {layer.id: [] for layer in self.layers}
        for layer in self.layers:
            for src in layer.inputs:
                out[src].append(layer.id)
        return out

    @property
    def input_layer(self) -> LayerSpec:
        return next(layer for layer in self.layers if layer.kind == INPUT)

    @property
    def outputs(self) -> list[str]:
        """Sink layers in declaration order (steering first, collision second)."""
        return [layer.id for layer in self.layers if not self.consumers[layer.id]]

    @cached_property
    def order(self) -> list[str]:
        return topological_order(self)

    @cached_property
    def inferred_shapes(self) -> dict[str, TensorShape]:
        return infer_shapes(self)

    def in_channels(self, layer_id: str) -> int:
        layer = self[layer_id]
        src = self.inferred_shapes[layer.inputs[0]]
        return src.elements if layer.kind == FC else src.channels

    def parametric_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.has_weights]

    def with_layers(self, layers, **changes) -> "Model":
        return replace(self, layers=tuple(layers), **changes)


def topological_order(model: Model) -> list[str]:
    """Kahn's algorithm; ready layers are taken in declaration order."""
    position = {layer.id: i for i, layer in enumerate(model.layers)}
    pending = {layer.id: len(set(layer.inputs)) for layer in model.layers}
    ready = sorted((i for i, n in pending.items() if n == 0), key=position.__getitem__)
    order: list[str] = []
    while ready:
        current = ready.pop(0)
        order.append(current)
        for consumer in dict.fromkeys(model.consumers[current]):
            pending[consumer] -= 1
            if pending[consumer] == 0:
                ready.append(consumer)
                ready.sort(key=position.__getitem__)
    if len(order) != len(model.layers):
        stuck = sorted(set(pending) - set(order), key=position.__getitem__)
        raise ModelError(f"cycle detected among layers {stuck}")
    return order


def infer_shapes(model: Model) -> dict[str, TensorShape]:
    """Annotate every layer with its output shape."""
    shapes: dict[str, TensorShape] = {}
    for layer_id in topological_order(model):
        layer = model[layer_id]
        srcs = [shapes[i] for i in layer.inputs]
        try:
            shapes[layer_id] = _layer_shape(layer, srcs, model.input_shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {layer_id!r}: {exc}") from None
    return shapes


def _layer_shape(layer: LayerSpec, srcs: list[TensorShape], input_shape: TensorShape) -> TensorShape:
    kind = layer.kind
    if kind == INPUT:
        return input_shape
    src = srcs[0]
    if kind in (CONV, MAXPOOL):
        h = conv_output_size(src.height, layer.kernel, layer.stride, layer.padding)
        w = conv_output_size(src.width, layer.kernel, layer.stride, layer.padding)
        if h < 1 or w < 1:
            raise ShapeError(f"non-positive output size {h}x{w} from input {src}")
        channels = layer.out_channels if kind == CONV else src.channels
        return TensorShape(channels, h, w)
    if kind == ADD:
        if srcs[0] != srcs[1]:
            raise ShapeError(f"Add branch shapes differ: {srcs[0]} vs {srcs[1]}")
        return src
    if kind == FLATTEN:
        return TensorShape(src.elements, 1, 1)
    if kind == FC:
        return TensorShape(layer.out_channels, 1, 1)
    return src  # ReLU, Sigmoid
