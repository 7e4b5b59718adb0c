"""Static and trace-based analyzers: MACs, size, sparsity, gradients, runtime."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ModelError
from .family import GAMMAS, family, remove_bypass
from .graph import CONV, FC, Model

# ------------------------------------------------------------ MACs / size


@dataclass(frozen=True)
class MacReport:
    per_layer: dict[str, int]
    total: int

    @property
    def shares(self) -> dict[str, float]:
        if self.total == 0:
            return {k: 0.0 for k in self.per_layer}
        return {k: v / self.total for k, v in self.per_layer.items()}

    def to_dict(self) -> dict:
        return {"per_layer": dict(self.per_layer), "total": self.total, "shares": self.shares}


@dataclass(frozen=True)
class SizeReport:
    per_layer: dict[str, int]
    total_params: int
    bytes_per_param: int = 1

    @property
    def total_bytes(self) -> int:
        return self.total_params * self.bytes_per_param

    def to_dict(self) -> dict:
        return {
            "per_layer": dict(self.per_layer),
            "total_params": self.total_params,
            "bytes_per_param": self.bytes_per_param,
            "total_bytes": self.total_bytes,
        }


def layer_macs(model: Model, layer_id: str) -> int:
    """Multiply-accumulates of one layer: H_out*W_out*C_out*K^2*C_in for convs."""
    layer = model[layer_id]
    if layer.kind == CONV:
        out = model.inferred_shapes[layer_id]
        return out.height * out.width * out.channels * layer.kernel ** 2 * model.in_channels(layer_id)
    if layer.kind == FC:
        return layer.out_channels * model.in_channels(layer_id)
    return 0


def layer_params(model: Model, layer_id: str) -> tuple[int, int]:
    """(kernel, bias) parameter counts of a parametric layer."""
    layer = model[layer_id]
    c_in = model.in_channels(layer_id)
    k2 = layer.kernel ** 2 if layer.kind == CONV else 1
    return k2 * c_in * layer.out_channels, layer.out_channels


def count_macs(model: Model) -> MacReport:
    per_layer = {layer.id: layer_macs(model, layer.id) for layer in model.parametric_layers()}
    return MacReport(per_layer, sum(per_layer.values()))


def count_params(model: Model, bytes_per_param: int = 1) -> SizeReport:
    per_layer = {layer.id: sum(layer_params(model, layer.id)) for layer in model.parametric_layers()}
    return SizeReport(per_layer, sum(per_layer.values()), bytes_per_param)


def compare_models(a: Model, b: Model, bytes_per_param: int = 1) -> dict:
    """Ratios a/b of size and MACs, plus absolute savings going from a to b."""
    size_a, size_b = count_params(a, bytes_per_param).total_bytes, count_params(b, bytes_per_param).total_bytes
    mac_a, mac_b = count_macs(a).total, count_macs(b).total
    return {
        "size_ratio": size_a / size_b if size_b else math.inf,
        "mac_ratio": mac_a / mac_b if mac_b else math.inf,
        "size_bytes": [size_a, size_b],
        "macs": [mac_a, mac_b],
        "size_saving_bytes": size_a - size_b,
        "mac_saving": mac_a - mac_b,
    }


def gamma_sweep(base_channels: int = 32, input_shape=None, bytes_per_param: int = 1) -> list[dict]:
    """Size/MAC savings of every family member against the gamma=1 baseline.

    ``scaling`` compares same-bypass members (channel scaling alone) and
    ``bypass_removal`` the with/without pair at each gamma.
    """
    kwargs = {"base_channels": base_channels}
    if input_shape is not None:
        kwargs["input_shape"] = input_shape
    baseline = family(1, True, **kwargs)
    rows = []
    for gamma in sorted(GAMMAS, reverse=True):
        with_byp = family(gamma, True, **kwargs)
        without = remove_bypass(with_byp)
        scaling = compare_models(baseline, with_byp, bytes_per_param)
        removal = compare_models(with_byp, without, bytes_per_param)
        rows.append({
            "gamma": float(gamma),
            "size_bytes": scaling["size_bytes"][1],
            "macs": scaling["macs"][1],
            "scaling_saving_bytes": scaling["size_saving_bytes"],
            "scaling_saving_macs": scaling["mac_saving"],
            "bypass_saving_bytes": removal["size_saving_bytes"],
            "bypass_saving_macs": removal["mac_saving"],
        })
    return rows


# ---------------------------------------------------------------- traces

TRACE_MAGIC = b"TPDT"
TRACE_VERSION = 1


@dataclass
class LayerTrace:
    channel_count: int
    samples_seen: int = 0
    counts: np.ndarray = None  # per-channel number of strictly positive values

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.channel_count, dtype=np.uint64)
        self.counts = np.asarray(self.counts, dtype=np.uint64)
        if self.counts.shape != (self.channel_count,):
            raise ModelError("trace counts length must equal channel_count")

    def __eq__(self, other):
        return (
            isinstance(other, LayerTrace)
            and self.channel_count == other.channel_count
            and self.samples_seen == other.samples_seen
            and np.array_equal(self.counts, other.counts)
        )


@dataclass
class ActivationTrace:
    """Per-layer, per-channel counts of strictly positive activations."""

    layers: dict[str, LayerTrace] = field(default_factory=dict)

    def accumulate(self, layer_id: str, activations: np.ndarray) -> None:
        """Add a batch of activations shaped (N, C, H, W) for one layer."""
        n, c = activations.shape[:2]
        entry = self.layers.get(layer_id)
        if entry is None:
            entry = self.layers[layer_id] = LayerTrace(c)
        positive = (activations > 0).reshape(n, c, -1).sum(axis=(0, 2), dtype=np.uint64)
        entry.counts = entry.counts + positive
        entry.samples_seen += n

    def merge(self, other: "ActivationTrace") -> "ActivationTrace":
        out = ActivationTrace()
        for name in dict.fromkeys([*self.layers, *other.layers]):
            a, b = self.layers.get(name), other.layers.get(name)
            if a is None or b is None:
                src = a or b
                out.layers[name] = LayerTrace(src.channel_count, src.samples_seen, src.counts.copy())
            else:
                out.layers[name] = LayerTrace(a.channel_count, a.samples_seen + b.samples_seen, a.counts + b.counts)
        return out

    @property
    def samples_seen(self) -> int:
        seen = {entry.samples_seen for entry in self.layers.values()}
        return seen.pop() if len(seen) == 1 else 0


def dumps_trace(trace: ActivationTrace) -> bytes:
    parts = [TRACE_MAGIC, struct.pack("<HI", TRACE_VERSION, len(trace.layers))]
    for name, entry in trace.layers.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<IQ", entry.channel_count, entry.samples_seen))
        parts.append(entry.counts.astype("<u8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_trace(data: bytes) -> ActivationTrace:
    if data[:4] != TRACE_MAGIC:
        raise FormatError("bad magic: not a TPDT trace file")
    if len(data) < 14:
        raise FormatError("checksum failure: trace file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum failure: trace file corrupt or truncated")
    version, n_layers = struct.unpack_from("<HI", body, 4)
    if version != TRACE_VERSION:
        raise FormatError(f"version mismatch: file {version}, supported {TRACE_VERSION}")
    pos, trace = 10, ActivationTrace()
    try:
        for _ in range(n_layers):
            (name_len,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + name_len].decode("utf-8")
            pos += 2 + name_len
            channels, seen = struct.unpack_from("<IQ", body, pos)
            pos += 12
            counts = np.frombuffer(body, dtype="<u8", count=channels, offset=pos)
            pos += 8 * channels
            trace.layers[name] = LayerTrace(channels, seen, counts.copy())
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed trace file: {exc}") from exc
    if pos != len(body):
        raise FormatError("trailing bytes in trace file")
    return trace


def save_trace(trace: ActivationTrace, path) -> None:
    Path(path).write_bytes(dumps_trace(trace))


def load_trace(path) -> ActivationTrace:
    try:
        return loads_trace(Path(path).read_bytes())
    except OSError as exc:
        raise FormatError(f"cannot read trace {path}: {exc}") from exc


def structural_sparsity(trace: ActivationTrace) -> dict[str, Fraction]:
    """Percentage of output channels that were never strictly positive."""
    if not trace.layers or any(e.samples_seen < 1 for e in trace.layers.values()):
        raise ModelError("empty trace")
    return {
        name: Fraction(100 * int(np.count_nonzero(entry.counts == 0)), entry.channel_count)
        for name, entry in trace.layers.items()
    }


# ------------------------------------------------------------- gradients


def gradient_stats(series: Sequence[float], window: int = 10) -> dict[str, float]:
    """Mean and population std of the trailing ``window`` entries."""
    if window < 1:
        raise ValueError("window must be at least 1")
    if window > len(series):
        raise ValueError(f"window {window} exceeds series length {len(series)}")
    tail = np.asarray(series[-window:], dtype=np.float64)
    return {"mean": float(tail.mean()), "std": float(tail.std()), "window": window}


# --------------------------------------------------------------- runtime

MEASURED_CYCLES = 1.1e6
MEASURED_MACS = 1.5e6


@dataclass(frozen=True)
class RuntimeCalibration:
    """Linear cycle model; the default is fitted to a single tiny-model run."""

    cycles_per_mac: float = MEASURED_CYCLES / MEASURED_MACS
    clock_hz: float = 100e6
    avg_power_w: float = 0.034
    provenance: str = "1.1 Mcycles for 1.5 MMAC on the gamma=0.125 model; extrapolation to other models is not linear"

    def __post_init__(self):
        for name in ("cycles_per_mac", "clock_hz", "avg_power_w"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be strictly positive, got {value}")


@dataclass(frozen=True)
class RuntimeEstimate:
    cycles: float
    latency_s: float
    fps: float
    energy_j: float

    def to_dict(self) -> dict:
        return {"cycles": self.cycles, "latency_s": self.latency_s, "fps": self.fps, "energy_j": self.energy_j}


def estimate_runtime(macs: int, calib: RuntimeCalibration = RuntimeCalibration()) -> RuntimeEstimate:
    cycles = macs * calib.cycles_per_mac
    latency = cycles / calib.clock_hz
    fps = 1.0 / latency if latency > 0 else math.inf
    return RuntimeEstimate(cycles, latency, fps, calib.avg_power_w * latency)


# --------------------------------------------------------------- tables


def format_table(header: Sequence[str], rows: Sequence[Sequence], footer: Sequence | None = None) -> str:
    """Aligned text table; numbers right-aligned, text left-aligned."""
    body = [list(map(str, header))] + [[_cell(v) for v in row] for row in rows]
    if footer is not None:
        body.append([_cell(v) for v in footer])
    widths = [max(len(r[i]) for r in body) for i in range(len(header))]
    numeric = [all(_is_number(row[i]) for row in rows) if rows else False for i in range(len(header))]

    def render(row):
        return "  ".join(c.rjust(w) if numeric[i] else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip()

    lines = [render(body[0]), "  ".join("-" * w for w in widths)]
    lines += [render(r) for r in body[1:len(rows) + 1]]
    if footer is not None:
        lines += ["  ".join("-" * w for w in widths), render(body[-1])]
    return "\n".join(lines) + "\n"


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4g}" if abs(value) < 1e4 else f"{value:,.0f}"
    if isinstance(value, int) and not isinstance(value, bool):
        return f"{value:,}"
    return str(value)


def _is_number(value) -> bool:
    return isinstance(value, (int, float, Fraction)) and not isinstance(value, bool)


def kb(nbytes: float) -> str:
    """Byte count rendered as kB (1000 bytes) with one decimal."""
    return f"{nbytes / 1000:.1f} kB"


def describe_rows(model: Model) -> tuple[list[str], list[list], list]:
    """Per-layer table rows: id, kind, output shape, params, MACs."""
    macs = count_macs(model)
    size = count_params(model)
    rows = []
    for layer in model.layers:
        rows.append([
            layer.id, layer.kind, str(model.inferred_shapes[layer.id]),
            size.per_layer.get(layer.id, 0), macs.per_layer.get(layer.id, 0),
        ])
    footer = ["total", "", "", size.total_params, macs.total]
    return ["layer", "kind", "output (HxWxC)", "params", "MACs"], rows, footer


def sparsity_table(trace: ActivationTrace) -> str:
    sparsity = structural_sparsity(trace)
    header = ["", *sparsity]
    row = ["sparsity %", *[f"{float(v):.2f}" for v in sparsity.values()]]
    return format_table(header, [row])

