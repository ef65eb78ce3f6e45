"""Uniform affine quantization: encodings, fake-quant, and integer kernels.

An encoding maps real values onto a uniform integer grid:

    x_int = clamp(round(x / scale) + zero_point, q_lo, q_hi)
    x_hat = scale * (x_int - zero_point)

Asymmetric encodings live on the unsigned grid [0, 2^b - 1] with a free
zero-point inside the grid; symmetric encodings pin the zero-point to 0 and
use either the unsigned grid or the signed two's-complement grid
[-2^(b-1), 2^(b-1) - 1]. Rounding breaks ties away from zero everywhere.

Scales are snapped to float32 precision at construction. Everything
downstream (export files, re-imported simulations) then sees exactly the
same scale, which makes save/load round trips bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import EncodingError, NumericError, ShapeError

__all__ = [
    "QuantEncoding",
    "QuantizerSpec",
    "round_half_away",
    "quantize_int",
    "dequantize",
    "qdq",
    "qdq_tensor",
    "integer_matmul_asymmetric",
    "integer_mac",
]

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantEncoding:
    """One quantization grid: scale, zero-point, bitwidth, and grid flavor."""

    scale: float
    zero_point: int = 0
    bitwidth: int = 8
    signed: bool = False
    symmetric: bool = False

    def __post_init__(self):
        if not (2 <= int(self.bitwidth) <= 32):
            raise EncodingError(f"bitwidth must be in [2, 32], got {self.bitwidth}")
        s = float(np.float32(self.scale))
        if not np.isfinite(s) or s <= 0.0:
            raise EncodingError(f"scale must be finite and positive, got {self.scale!r}")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "zero_point", int(self.zero_point))
        object.__setattr__(self, "bitwidth", int(self.bitwidth))
        if self.signed and not self.symmetric:
            raise EncodingError("signed grids are only defined for symmetric encodings")
        if self.symmetric and self.zero_point != 0:
            raise EncodingError(f"symmetric encodings require zero_point == 0, got {self.zero_point}")
        if not (self.q_lo <= self.zero_point <= self.q_hi) and not self.signed:
            raise EncodingError(
                f"zero_point {self.zero_point} outside the {self.bitwidth}-bit grid "
                f"[{self.q_lo}, {self.q_hi}]"
            )

    @property
    def q_lo(self) -> int:
        return -(2 ** (self.bitwidth - 1)) if self.signed else 0

    @property
    def q_hi(self) -> int:
        return 2 ** (self.bitwidth - 1) - 1 if self.signed else 2**self.bitwidth - 1

    @property
    def grid_min(self) -> float:
        """Smallest representable real value: scale * (q_lo - zero_point)."""
        return self.scale * (self.q_lo - self.zero_point)

    @property
    def grid_max(self) -> float:
        """Largest representable real value: scale * (q_hi - zero_point)."""
        return self.scale * (self.q_hi - self.zero_point)


def quantize_int(x, e: QuantEncoding) -> np.ndarray:
    """Map real values to integers on the encoding's grid (round, then clamp)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("quantize_int got non-finite input")
    q = round_half_away(x / e.scale) + e.zero_point
    return np.clip(q, e.q_lo, e.q_hi).astype(np.int64)


def dequantize(xi, e: QuantEncoding) -> np.ndarray:
    """Map grid integers back to real values. Rejects off-grid input."""
    xi = np.asarray(xi)
    if not np.issubdtype(xi.dtype, np.integer):
        if not np.all(xi == np.round(xi)):
            raise EncodingError("dequantize expects integer grid values")
        xi = xi.astype(np.int64)
    if xi.size and (xi.min() < e.q_lo or xi.max() > e.q_hi):
        raise EncodingError(
            f"dequantize input outside the {e.bitwidth}-bit grid [{e.q_lo}, {e.q_hi}]"
        )
    return e.scale * (xi.astype(np.float64) - e.zero_point)


def qdq_tensor(x, e: QuantEncoding) -> np.ndarray:
    """Quantize-dequantize through a single encoding."""
    return dequantize(quantize_int(x, e), e)


@dataclass
class QuantizerSpec:
    """A quantizer attached to one tensor.

    Holds the policy (bitwidth, symmetry, optional per-channel axis) plus the
    computed encodings: one entry for per-tensor, one per channel otherwise.
    Frozen specs survive any later encoding recomputation untouched.
    """

    bitwidth: int = 8
    symmetric: bool = False
    channel_axis: Optional[int] = None
    enabled: bool = True
    encodings: Optional[list[QuantEncoding]] = None
    frozen: bool = False

    @property
    def per_channel(self) -> bool:
        return self.channel_axis is not None

    @property
    def ready(self) -> bool:
        return not self.enabled or bool(self.encodings)

    def set_encodings(self, encodings, frozen: bool | None = None) -> None:
        if self.frozen and not frozen:
            return
        if isinstance(encodings, QuantEncoding):
            encodings = [encodings]
        for enc in encodings:
            if enc.bitwidth != self.bitwidth:
                raise EncodingError(
                    f"encoding bitwidth {enc.bitwidth} does not match quantizer bitwidth {self.bitwidth}"
                )
        self.encodings = list(encodings)
        if frozen is not None:
            self.frozen = bool(frozen)

    def clone(self) -> "QuantizerSpec":
        return replace(self, encodings=None if self.encodings is None else list(self.encodings))


def _per_channel_arrays(spec: QuantizerSpec, x: np.ndarray):
    """Broadcastable (scale, zero_point, q_lo, q_hi) arrays for per-channel qdq."""
    axis = spec.channel_axis
    c = x.shape[axis]
    if len(spec.encodings) != c:
        raise EncodingError(
            f"per-channel quantizer has {len(spec.encodings)} encodings for {c} channels"
        )
    shape = [1] * x.ndim
    shape[axis] = c
    scale = np.array([e.scale for e in spec.encodings]).reshape(shape)
    zp = np.array([e.zero_point for e in spec.encodings], dtype=np.float64).reshape(shape)
    lo = np.array([e.q_lo for e in spec.encodings], dtype=np.float64).reshape(shape)
    hi = np.array([e.q_hi for e in spec.encodings], dtype=np.float64).reshape(shape)
    return scale, zp, lo, hi


def qdq(x, spec: QuantizerSpec) -> np.ndarray:
    """Simulate quantization of a tensor: quantize to the grid, dequantize back.

    Disabled quantizers are a strict identity. Enabled quantizers require
    computed encodings.
    """
    x = np.asarray(x, dtype=np.float64)
    if not spec.enabled:
        return x
    if not spec.encodings:
        raise EncodingError("quantizer has no encodings; run range calibration first")
    if not spec.per_channel:
        return qdq_tensor(x, spec.encodings[0])
    if not (0 <= spec.channel_axis < x.ndim):
        raise ShapeError(f"channel_axis {spec.channel_axis} out of range for shape {x.shape}")
    scale, zp, lo, hi = _per_channel_arrays(spec, x)
    q = np.clip(round_half_away(x / scale) + zp, lo, hi)
    return scale * (q - zp)


def ste_mask(x, spec: QuantizerSpec) -> np.ndarray:
    """Straight-through gradient mask: 1 inside the encoding grid, 0 where clipped."""
    x = np.asarray(x, dtype=np.float64)
    if not spec.enabled:
        return np.ones_like(x)
    if not spec.encodings:
        raise EncodingError("quantizer has no encodings; run range calibration first")
    if not spec.per_channel:
        e = spec.encodings[0]
        return ((x >= e.grid_min) & (x <= e.grid_max)).astype(np.float64)
    scale, zp, lo, hi = _per_channel_arrays(spec, x)
    gmin = scale * (lo - zp)
    gmax = scale * (hi - zp)
    return ((x >= gmin) & (x <= gmax)).astype(np.float64)


# ---------------------------------------------------------------------------
# Integer accumulation paths


def _check_int_operands(wi: np.ndarray, xi: np.ndarray, ew: QuantEncoding, ex: QuantEncoding):
    if wi.ndim != 2 or xi.ndim not in (1, 2):
        raise ShapeError(f"expected 2-d weights and 1-d/2-d activations, got {wi.shape}, {xi.shape}")
    if wi.shape[1] != xi.shape[0]:
        raise ShapeError(f"inner dimensions differ: {wi.shape} @ {xi.shape}")
    for name, arr, e in (("weight", wi, ew), ("activation", xi, ex)):
        if arr.size and (arr.min() < e.q_lo or arr.max() > e.q_hi):
            raise EncodingError(f"{name} integers fall outside their {e.bitwidth}-bit grid")


def _overflow_guard(wi: np.ndarray, xi: np.ndarray, ew: QuantEncoding, ex: QuantEncoding):
    """Conservative bound check so int64 intermediates cannot wrap."""
    k = wi.shape[1]
    wmax = int(np.abs(wi).max(initial=0))
    xmax = int(np.abs(xi).max(initial=0))
    zw, zx = abs(ew.zero_point), abs(ex.zero_point)
    bound = k * (wmax * xmax + zw * xmax + zx * wmax + zw * zx)
    if bound >= 2**62:
        raise NumericError("integer accumulation would overflow the 64-bit working range")


def integer_matmul_asymmetric(wi, xi, ew: QuantEncoding, ex: QuantEncoding) -> np.ndarray:
    """Integer-only matmul of asymmetric operands, returned in real units.

    Expands (W_int - z_w)(x_int - z_x) into four integer terms - the data
    product, two zero-point cross terms, and a constant - accumulates them
    exactly in int64, and applies the combined scale s_w * s_x once at the
    end. Matches matmul of the dequantized operands up to float rounding.
    """
    wi = np.asarray(wi, dtype=np.int64)
    xi = np.asarray(xi, dtype=np.int64)
    _check_int_operands(wi, xi, ew, ex)
    _overflow_guard(wi, xi, ew, ex)
    k = wi.shape[1]
    acc = wi @ xi  # [n] or [n, m]
    col_sum = xi.sum(axis=0)  # scalar-shaped [m] or []
    row_sum = wi.sum(axis=1)  # [n]
    if xi.ndim == 2:
        row_sum = row_sum[:, None]
    acc = acc - ew.zero_point * col_sum - ex.zero_point * row_sum + k * ew.zero_point * ex.zero_point
    return (ew.scale * ex.scale) * acc.astype(np.float64)


def integer_mac(wi, xi, bias_int=None, ew: QuantEncoding = None, ex: QuantEncoding = None) -> np.ndarray:
    """32-bit accumulator matmul with symmetric weights.

    Requires z_w == 0. The activation zero-point correction term
    (z_x * row_sum(W_int)) and the bias, pre-quantized at scale s_w * s_x,
    are folded into the accumulator, so dequantizing the result with
    s_w * s_x reproduces the real product. Raises on accumulator overflow
    rather than wrapping.
    """
    wi = np.asarray(wi, dtype=np.int64)
    xi = np.asarray(xi, dtype=np.int64)
    if ew is None or ex is None:
        raise EncodingError("integer_mac needs both weight and activation encodings")
    if ew.zero_point != 0:
        raise EncodingError("integer_mac requires a symmetric weight encoding (z_w == 0)")
    _check_int_operands(wi, xi, ew, ex)
    _overflow_guard(wi, xi, ew, ex)
    acc = wi @ xi
    if ex.zero_point:
        row_sum = wi.sum(axis=1)
        if xi.ndim == 2:
            row_sum = row_sum[:, None]
        acc = acc - ex.zero_point * row_sum
    if bias_int is not None:
        b = np.asarray(bias_int, dtype=np.int64)
        if b.shape != (wi.shape[0],):
            raise ShapeError(f"bias_int shape {b.shape} does not match {wi.shape[0]} rows")
        acc = acc + (b[:, None] if acc.ndim == 2 else b)
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise NumericError("32-bit accumulator overflow")
    return acc
