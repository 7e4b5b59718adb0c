"""Execution schedule, buffer liveness and peak memory under two allocators."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .graph import ALIASING, INPUT, Model, topological_order
from .analysis import layer_params

INCREMENTAL = "incremental"
DYNAMIC = "dynamic"
STREAMED = "streamed"
RESIDENT = "resident"
L2_BUDGET = 512_000


def topo_schedule(model: Model) -> list[str]:
    """Topological order, ties broken by declaration order.

    Family blocks declare the main branch before the by-pass conv, so the
    main branch always runs first within a ResBlock.
    """
    return topological_order(model)


@dataclass(frozen=True)
class LivenessInterval:
    buffer: str
    first_step: int
    last_step: int
    bytes: int
    kind: str = "activation"  # or "weights"

    def overlaps(self, other: "LivenessInterval") -> bool:
        return self.first_step <= other.last_step and other.first_step <= self.last_step


def storage_of(model: Model) -> dict[str, str]:
    """Map each layer to the layer that owns its output storage.

    ReLU, Flatten and Sigmoid run in place; Add accumulates into its first
    (main-branch) input.  In-place is only legal when the layer is the sole
    consumer of that input, otherwise it gets a fresh buffer.
    """
    owner: dict[str, str] = {}
    for layer_id in topological_order(model):
        layer = model[layer_id]
        owner[layer_id] = layer_id
        if layer.kind in ALIASING:
            for src in dict.fromkeys(layer.inputs):
                if model.consumers[src] == [layer_id]:
                    owner[layer_id] = owner[src]
                    break
    return owner


def _weight_bytes(model: Model, layer_id: str, weight_bytes, overrides: Mapping[str, int]) -> int:
    return sum(layer_params(model, layer_id)) * overrides.get(layer_id, weight_bytes)


def compute_liveness(
    model: Model,
    sched: Optional[list[str]] = None,
    weights_mode: str = STREAMED,
    element_bytes: int = 1,
    weight_bytes: int = 1,
    weight_overrides: Optional[Mapping[str, int]] = None,
) -> list[LivenessInterval]:
    """Activation buffers live from producer to last consumer (through aliases).

    Network outputs stay live until the final step.  Weights are live only
    at their layer's step when streamed, and across the whole schedule when
    resident.
    """
    sched = sched or topo_schedule(model)
    overrides = dict(weight_overrides or {})
    step = {layer_id: i for i, layer_id in enumerate(sched)}
    owner = storage_of(model)
    shapes = model.inferred_shapes
    last = len(sched) - 1
    spans: dict[str, list[int]] = {}
    for layer_id in sched:
        buf = owner[layer_id]
        span = spans.setdefault(buf, [step[layer_id], step[layer_id]])
        span[1] = max(span[1], step[layer_id])
        consumers = model.consumers[layer_id]
        if not consumers:
            span[1] = last
        for consumer in consumers:
            span[1] = max(span[1], step[consumer])
    intervals = [
        LivenessInterval(buf, first, end, shapes[buf].nbytes(element_bytes))
        for buf, (first, end) in spans.items()
    ]
    for layer_id in sched:
        if model[layer_id].has_weights:
            nbytes = _weight_bytes(model, layer_id, weight_bytes, overrides)
            first, end = (step[layer_id], step[layer_id]) if weights_mode == STREAMED else (0, last)
            intervals.append(LivenessInterval(f"{layer_id}.weights", first, end, nbytes, "weights"))
    return intervals


@dataclass
class MemoryPlan:
    allocator: str
    weights_mode: str
    element_bytes: int
    schedule: list[str]
    per_step_live_bytes: list[int]
    peak_bytes: int
    peak_step: int
    intervals: list[LivenessInterval] = field(default_factory=list)
    offsets: dict[str, int] = field(default_factory=dict)
    footprint_bytes: Optional[int] = None

    @property
    def peak_layer(self) -> str:
        return self.schedule[self.peak_step]

    def live_buffers(self, i: int) -> list[str]:
        return [iv.buffer for iv in self.intervals if iv.first_step <= i <= iv.last_step]

    def headroom(self, budget: int = L2_BUDGET) -> int:
        return budget - self.peak_bytes

    def to_dict(self) -> dict:
        doc = {
            "allocator": self.allocator,
            "weights_mode": self.weights_mode,
            "element_bytes": self.element_bytes,
            "peak_bytes": self.peak_bytes,
            "peak_step": self.peak_step,
            "peak_layer": self.peak_layer,
            "steps": [
                {"id": layer_id, "live_bytes": live, "live_buffers": self.live_buffers(i)}
                for i, (layer_id, live) in enumerate(zip(self.schedule, self.per_step_live_bytes))
            ],
            "offsets": dict(self.offsets),
        }
        if self.footprint_bytes is not None:
            doc["footprint_bytes"] = self.footprint_bytes
        return doc

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["step", "id", "live_bytes"])
        for i, (layer_id, live) in enumerate(zip(self.schedule, self.per_step_live_bytes)):
            writer.writerow([i, layer_id, live])
        return out.getvalue()


def plan_incremental(model: Model, element_bytes: int = 1, weight_bytes: int = 1) -> MemoryPlan:
    """No reuse: every activation buffer and every weight tensor stays allocated."""
    sched = topo_schedule(model)
    intervals = compute_liveness(model, sched, RESIDENT, element_bytes, weight_bytes)
    allocated_at = {}
    for iv in intervals:
        key = iv.buffer[: -len(".weights")] if iv.kind == "weights" else iv.buffer
        allocated_at[key] = allocated_at.get(key, 0) + iv.bytes
    per_step, running = [], 0
    for layer_id in sched:
        running += allocated_at.get(layer_id, 0)
        per_step.append(running)
    return MemoryPlan(INCREMENTAL, RESIDENT, element_bytes, sched, per_step, running, len(sched) - 1, intervals)


def plan_dynamic(
    model: Model,
    weights_mode: str = STREAMED,
    element_bytes: int = 1,
    weight_bytes: int = 1,
    weight_overrides: Optional[Mapping[str, int]] = None,
) -> MemoryPlan:
    """Liveness-based reuse; peak is the largest simultaneously-live byte set.

    Concrete offsets come from :func:`assign_offsets`; ``footprint_bytes``
    is the arena size they need, never below ``peak_bytes``.
    """
    if weights_mode not in (STREAMED, RESIDENT):
        raise ValueError(f"unknown weights mode {weights_mode!r}")
    sched = topo_schedule(model)
    intervals = compute_liveness(model, sched, weights_mode, element_bytes, weight_bytes, weight_overrides)
    per_step = [0] * len(sched)
    for iv in intervals:
        for i in range(iv.first_step, iv.last_step + 1):
            per_step[i] += iv.bytes
    peak = max(per_step)
    offsets = assign_offsets(model, intervals, peak)
    footprint = max((offsets[iv.buffer] + iv.bytes for iv in intervals), default=0)
    return MemoryPlan(DYNAMIC, weights_mode, element_bytes, sched, per_step, peak, per_step.index(peak),
                      intervals, offsets, footprint)


def assign_offsets(model: Model, intervals: list[LivenessInterval], arena: int) -> dict[str, int]:
    """Two-ended first-fit placement inside an arena of size ``arena``.

    Whole-run weights are pinned first, then intervals in order of first
    use.  An activation buffer goes to the end of the arena opposite to its
    producer's input buffer (ping-pong); weights fill the gap from the bottom.  On a chain this reaches the
    live-set bound exactly; when nothing fits the arena grows upward.
    """
    owner = storage_of(model)
    end = max((iv.last_step for iv in intervals), default=0)
    # Buffers live for the whole run (resident weights) are pinned first.
    order = sorted(intervals, key=lambda iv: (
        (iv.first_step, iv.last_step) != (0, end) or iv.kind == "activation",
        iv.first_step, iv.kind != "activation", -iv.bytes, iv.buffer))
    placed: list[tuple[LivenessInterval, int]] = []
    offsets: dict[str, int] = {}
    side: dict[str, bool] = {}  # True = top
    for iv in order:
        busy = sorted((off, off + other.bytes) for other, off in placed if other.overlaps(iv))
        prefer_top = False
        if iv.kind == "activation" and model[iv.buffer].kind != INPUT:
            src = owner[model[iv.buffer].inputs[0]]
            prefer_top = not side.get(src, False)
        offset = None
        for top in (prefer_top, not prefer_top):
            offset = _fit_top(busy, iv.bytes, arena) if top else _fit_bottom(busy, iv.bytes, arena)
            if offset is not None:
                side[iv.buffer] = top
                break
        if offset is None:
            offset = _fit_bottom(busy, iv.bytes, None)
            side[iv.buffer] = False
        offsets[iv.buffer] = offset
        placed.append((iv, offset))
    return offsets


def _conflicts(busy, start, size) -> bool:
    return any(start < hi and lo < start + size for lo, hi in busy)


def _fit_bottom(busy, size, limit):
    for start in sorted({0, *(hi for _, hi in busy)}):
        if limit is not None and start + size > limit:
            return None
        if not _conflicts(busy, start, size):
            return start
    return None


def _fit_top(busy, size, limit):
    candidates = {limit - size, *(lo - size for lo, _ in busy)}
    for start in sorted(candidates, reverse=True):
        if 0 <= start <= limit - size and not _conflicts(busy, start, size):
            return start
    return None


def bypass_overlap_report(model: Model, element_bytes: int = 1) -> dict[str, int]:
    """Bytes held live per ResBlock only because a parallel branch needs them.

    For each Add, the held buffer is the latest common ancestor of its two
    branches: it must survive the whole first branch until the second one
    consumes it.  Groups without a join report 0.
    """
    sched = topo_schedule(model)
    step = {layer_id: i for i, layer_id in enumerate(sched)}
    owner = storage_of(model)
    report = {layer.group: 0 for layer in model.layers if layer.group is not None}
    ancestors: dict[str, set[str]] = {}
    for layer_id in sched:
        acc = {layer_id}
        for src in model[layer_id].inputs:
            acc |= ancestors[src]
        ancestors[layer_id] = acc
    for layer in model.layers:
        if layer.kind != "Add":
            continue
        common = ancestors[layer.inputs[0]] & ancestors[layer.inputs[1]]
        fork = max(common, key=step.__getitem__)
        held = model.inferred_shapes[owner[fork]].nbytes(element_bytes)
        key = layer.group or layer.id
        report[key] = report.get(key, 0) + held
    return report
