"""Fake quantization with straight-through gradients.

Weights are quantized per output channel (axis 0). Scales are computed in
float64 and the dequantized values cast back to float32, which keeps the
affine quantizer exactly idempotent.
"""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, Tensor, straight_through

PRECISION_RANK = {"ternary": 0, "int2": 1, "int3": 2, "int4": 3, "int5": 4, "int6": 5, "int7": 6, "int8": 7, "float": 8}


def _per_channel(w: np.ndarray) -> np.ndarray:
    return np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)


def _check_finite(w: np.ndarray):
    if not np.all(np.isfinite(w)):
        raise ValueError("quantizer input contains non-finite values")


# ----------------------------------------------------------------- ternary
def ternary_params(w: np.ndarray, threshold: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (scale, cut) for ternarization. ``cut`` is the absolute threshold."""
    _check_finite(w)
    a = np.abs(_per_channel(w))
    cut = threshold * a.max(axis=1)
    mask = a > cut[:, None]
    count = mask.sum(axis=1)
    scale = np.where(count > 0, (a * mask).sum(axis=1) / np.maximum(count, 1), 0.0)
    return scale, cut


def ternary_codes(w: np.ndarray, scale: np.ndarray, cut: np.ndarray) -> np.ndarray:
    flat = _per_channel(w)
    codes = np.sign(flat) * (np.abs(flat) > cut[:, None])
    return codes.astype(np.int8).reshape(w.shape)


def quantize_ternary_array(w: np.ndarray, threshold: float = 0.05, params=None) -> np.ndarray:
    scale, cut = params if params is not None else ternary_params(w, threshold)
    codes = ternary_codes(w, scale, cut).reshape(w.shape[0], -1)
    return (codes * scale[:, None]).astype(DTYPE).reshape(w.shape)


def quantize_ternary(w: Tensor, threshold: float = 0.05, params=None) -> Tensor:
    """Values in {-s_c, 0, +s_c} per output channel; identity gradient."""
    return straight_through(w, quantize_ternary_array(w.data, threshold, params))


# ------------------------------------------------------------------ affine
def qmax(bits: int) -> int:
    if not 2 <= bits <= 8:
        raise ValueError(f"bit-width must lie in [2, 8], got {bits}")
    return 2 ** (bits - 1) - 1


def affine_scale(w: np.ndarray, bits: int = 8) -> np.ndarray:
    _check_finite(w)
    return np.abs(_per_channel(w)).max(axis=1) / qmax(bits)


def affine_codes(w: np.ndarray, scale: np.ndarray, bits: int = 8) -> np.ndarray:
    flat = _per_channel(w)
    safe = np.where(scale > 0, scale, 1.0)
    q = np.rint(flat / safe[:, None])
    q = np.clip(q, -qmax(bits), qmax(bits))
    q[scale == 0] = 0
    return q.astype(np.int8 if bits <= 8 else np.int32).reshape(w.shape)


def quantize_affine_array(w: np.ndarray, bits: int = 8, scale: np.ndarray | None = None) -> np.ndarray:
    scale = affine_scale(w, bits) if scale is None else scale
    q = affine_codes(w, scale, bits).reshape(w.shape[0], -1)
    return (q * scale[:, None]).astype(DTYPE).reshape(w.shape)


def quantize_affine(w: Tensor, bits: int = 8, scale: np.ndarray | None = None) -> Tensor:
    """Symmetric per-channel round-to-nearest fake quantization; identity gradient."""
    return straight_through(w, quantize_affine_array(w.data, bits, scale))


def activation_codes(x: np.ndarray, bits: int = 8) -> tuple[np.ndarray, float]:
    """Per-tensor symmetric integer codes (as floats) and their scale."""
    m = float(np.abs(x).max()) if x.size else 0.0
    if m == 0.0:
        return np.zeros(x.shape, DTYPE), 0.0
    s = m / qmax(bits)
    return np.clip(np.rint(x.astype(np.float64) / s), -qmax(bits), qmax(bits)).astype(DTYPE), s


def quantize_activation_array(x: np.ndarray, bits: int = 8) -> np.ndarray:
    q, s = activation_codes(x, bits)
    if s == 0.0:
        return np.asarray(x, dtype=DTYPE)
    return (q.astype(np.float64) * s).astype(DTYPE)


def quantize_activation(x: Tensor, bits: int = 8) -> Tensor:
    """Per-tensor symmetric fake quantization of activations."""
    return straight_through(x, quantize_activation_array(x.data, bits))


# ------------------------------------------------------------- quantizers
class WeightQuantizer:
    """Per-channel weight quantizer bound to one CU precision.

    Statistics are recomputed every call until :meth:`freeze`, after which the
    stored per-channel parameters are reused.
    """

    def __init__(self, precision: str, threshold: float = 0.05):
        if precision not in PRECISION_RANK:
            raise ValueError(f"unknown weight precision {precision!r}")
        self.precision = precision
        self.threshold = threshold
        self.frozen: dict[str, np.ndarray] | None = None

    @property
    def bits(self) -> int | None:
        if self.precision.startswith("int"):
            return int(self.precision[3:])
        return None

    def params(self, w: np.ndarray) -> dict[str, np.ndarray]:
        if self.frozen is not None:
            return self.frozen
        if self.precision == "ternary":
            scale, cut = ternary_params(w, self.threshold)
            return {"scale": scale, "cut": cut}
        if self.bits is not None:
            return {"scale": affine_scale(w, self.bits)}
        return {}

    def array(self, w: np.ndarray) -> np.ndarray:
        p = self.params(w)
        if self.precision == "ternary":
            return quantize_ternary_array(w, self.threshold, (p["scale"], p["cut"]))
        if self.bits is not None:
            return quantize_affine_array(w, self.bits, p["scale"])
        return np.asarray(w, dtype=DTYPE)

    def __call__(self, w: Tensor) -> Tensor:
        if self.precision == "float":
            return w
        return straight_through(w, self.array(w.data))

    def codes(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Integer codes and per-channel scale as deployed; floats pass through."""
        p = self.params(w)
        if self.precision == "ternary":
            return ternary_codes(w, p["scale"], p["cut"]), p["scale"]
        if self.bits is not None:
            return affine_codes(w, p["scale"], self.bits), p["scale"]
        return np.asarray(w, dtype=DTYPE), None

    def freeze(self, w: np.ndarray):
        self.frozen = None
        self.frozen = {k: v.copy() for k, v in self.params(w).items()}

    def permute(self, perm: np.ndarray):
        if self.frozen is not None:
            self.frozen = {k: v[perm] for k, v in self.frozen.items()}
