"""Symmetric per-tensor int8 quantization, for size accounting."""

from dataclasses import dataclass

import numpy as np

from ..serialize import WeightSet


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray  # int8
    scale: float

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale

    @property
    def nbytes(self) -> int:
        return self.values.size


def quantize_tensor(w) -> QuantizedTensor:
    """scale = max|w| / 127, round half to even; an all-zero tensor gets scale 1."""
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite weights")
    peak = float(np.abs(w).max()) if w.size else 0.0
    if peak == 0.0:
        return QuantizedTensor(np.zeros(w.shape, np.int8), 1.0)
    q = np.clip(np.rint(w * 127.0 / peak), -127, 127).astype(np.int8)
    return QuantizedTensor(q, peak / 127.0)


def quantize_weights(weights: WeightSet) -> dict:
    tensors = {name: quantize_tensor(arr) for name, arr in weights.items()}
    return {"tensors": tensors, "nbytes": sum(t.nbytes for t in tensors.values())}
