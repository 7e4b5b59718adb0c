"""Model JSON documents and the TPDW binary weight format."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import FormatError, ModelError
from .family import FamilyConfig, as_gamma
from .graph import LayerSpec, Model, TensorShape

MODEL_FORMAT = "tinydronet-model"
MODEL_VERSION = 1
WEIGHTS_MAGIC = b"TPDW"
WEIGHTS_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4")}
_DTYPE_TO_CODE = {v: k for k, v in DTYPE_CODES.items()}

_LAYER_DEFAULTS = {"kernel": 0, "stride": 1, "padding": 0, "out_channels": 0, "group": None}


# ---------------------------------------------------------------- models

def model_to_dict(model: Model) -> dict:
    cfg = model.family_config
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION}
    if isinstance(cfg, FamilyConfig):
        doc.update(family="pulp-dronet", gamma=float(cfg.gamma), bypass=cfg.with_bypass,
                   base_channels=cfg.base_channels)
    else:
        doc["family"] = None
    doc["input"] = model.input_shape.as_list()
    layers = []
    for layer in model.layers:
        entry = {"id": layer.id, "kind": layer.kind, "inputs": list(layer.inputs)}
        for key, default in _LAYER_DEFAULTS.items():
            value = getattr(layer, key)
            if value != default:
                entry[key] = value
        layers.append(entry)
    doc["layers"] = layers
    return doc


def model_from_dict(doc: Mapping) -> Model:
    if not isinstance(doc, Mapping) or doc.get("format") != MODEL_FORMAT:
        raise FormatError("not a model document (bad format tag)")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        input_shape = TensorShape(*[int(v) for v in doc["input"]])
        layers = []
        for entry in doc["layers"]:
            extra = {k: entry[k] for k in _LAYER_DEFAULTS if k in entry}
            layers.append(LayerSpec(entry["id"], entry["kind"], tuple(entry.get("inputs", ())), **extra))
        cfg = None
        if doc.get("family") == "pulp-dronet":
            cfg = FamilyConfig(as_gamma(doc["gamma"]), bool(doc["bypass"]), input_shape,
                               int(doc["base_channels"]))
        model = Model(tuple(layers), input_shape, cfg)
        model.inferred_shapes
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed model document: {exc}") from exc
    return model


def dumps_model(model: Model) -> str:
    return json.dumps(model_to_dict(model), indent=2) + "\n"


def save_model(model: Model, path) -> None:
    Path(path).write_text(dumps_model(model))


def load_model(path) -> Model:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read model {path}: {exc}") from exc
    return model_from_dict(doc)


# --------------------------------------------------------------- weights

@dataclass(frozen=True, eq=False)
class WeightSet(Mapping):
    """Named float32 tensors; ``<layer>.weight`` and ``<layer>.bias``."""

    entries: Mapping[str, np.ndarray]

    def __post_init__(self):
        frozen = {}
        for name, value in self.entries.items():
            arr = np.array(value, dtype=np.float32)
            arr.setflags(write=False)
            frozen[str(name)] = arr
        object.__setattr__(self, "entries", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, WeightSet):
            return NotImplemented
        return list(self.entries) == list(other.entries) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    __hash__ = None

    @property
    def checksum(self) -> int:
        return zlib.crc32(_encode_body(self))

    @property
    def n_params(self) -> int:
        return sum(arr.size for arr in self.entries.values())


def weight_names(layer_id: str) -> tuple[str, str]:
    return f"{layer_id}.weight", f"{layer_id}.bias"


def expected_weight_dims(model: Model) -> dict[str, tuple[int, ...]]:
    """Kernel/bias dims for each parametric layer, in declaration order."""
    dims = {}
    for layer in model.parametric_layers():
        c_in = model.in_channels(layer.id)
        w, b = weight_names(layer.id)
        if layer.kind == "Conv2d":
            dims[w] = (layer.out_channels, c_in, layer.kernel, layer.kernel)
        else:
            dims[w] = (layer.out_channels, c_in)
        dims[b] = (layer.out_channels,)
    return dims


def check_weights(model: Model, weights: WeightSet) -> None:
    expected = expected_weight_dims(model)
    for name, dims in expected.items():
        if name not in weights:
            layer = name.rsplit(".", 1)[0]
            raise ModelError(f"orphan layer {layer!r}: missing tensor {name!r}")
        if weights[name].shape != dims:
            raise ModelError(f"tensor {name!r} has dims {weights[name].shape}, expected {dims}")
    for name in weights:
        if name not in expected:
            raise ModelError(f"dangling tensor {name!r} matches no layer")


def _encode_body(weights: WeightSet) -> bytes:
    parts = [WEIGHTS_MAGIC, struct.pack("<HI", WEIGHTS_VERSION, len(weights))]
    for name, arr in weights.entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _DTYPE_TO_CODE[np.dtype("<f4")], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def dumps_weights(weights: WeightSet) -> bytes:
    body = _encode_body(weights)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_weights(data: bytes, model: Model | None = None) -> WeightSet:
    if len(data) < 4 or data[:4] != WEIGHTS_MAGIC:
        raise FormatError("bad magic: not a TPDW weight file")
    if len(data) < 14:
        raise FormatError("checksum failure: weight file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checksum failure: weight file corrupt or truncated")
    version, count = struct.unpack_from("<HI", body, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"version mismatch: file {version}, supported {WEIGHTS_VERSION}")
    pos = 10
    entries = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + name_len].decode("utf-8")
            pos += name_len
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            if code not in DTYPE_CODES:
                raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64))
            dtype = DTYPE_CODES[code]
            payload = body[pos:pos + n * dtype.itemsize]
            if len(payload) != n * dtype.itemsize:
                raise FormatError(f"tensor {name!r}: payload truncated")
            pos += n * dtype.itemsize
            if name in entries:
                raise FormatError(f"duplicate tensor {name!r}")
            entries[name] = np.frombuffer(payload, dtype=dtype).reshape(dims)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed weight file: {exc}") from exc
    if pos != len(body):
        raise FormatError("trailing bytes after last tensor")
    weights = WeightSet(entries)
    if model is not None:
        check_weights(model, weights)
    return weights


def save_weights(weights: WeightSet, path) -> None:
    Path(path).write_bytes(dumps_weights(weights))


def load_weights(path, model: Model | None = None) -> WeightSet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read weights {path}: {exc}") from exc
    return loads_weights(data, model)
