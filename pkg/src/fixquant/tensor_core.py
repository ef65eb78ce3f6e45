"""Dense tensors and reference floating-point kernels.

Tensors are plain numpy arrays. Real-valued tensors are float64 and
C-contiguous (row-major); integer tensors are int64. Model weights are kept
float32-representable (see :func:`f32`) so that writing them to a float32 blob
and reading them back is lossless, while all arithmetic runs in float64.

The kernels here are deliberately direct implementations: accumulation order
is the natural row-major ascending order of numpy reductions, which makes
results reproducible run to run. Kernels never let NaN or Inf propagate
silently; they raise NumericError instead.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "as_tensor",
    "as_int_tensor",
    "f32",
    "ensure_finite",
    "matmul",
    "linear",
    "conv2d",
    "batchnorm",
    "relu",
    "relu6",
    "add",
    "concat",
    "maxpool",
    "avgpool",
    "elementwise",
]


def as_tensor(data) -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 array."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    ensure_finite(arr, "tensor data")
    return arr


def as_int_tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous int64 array."""
    return np.ascontiguousarray(data, dtype=np.int64)


def f32(data) -> np.ndarray:
    """Snap values to float32 precision but keep float64 storage.

    Used for model weights so that the on-disk float32 blob format
    round-trips bit-exactly.
    """
    arr = np.ascontiguousarray(data, dtype=np.float32).astype(np.float64)
    ensure_finite(arr, "weight data")
    return arr


def ensure_finite(arr: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def _pair(v, name: str) -> tuple[int, int]:
    """Normalize an int-or-pair attribute to a (h, w) tuple."""
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ShapeError(f"{name} must be an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# MAC kernels


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects a 2-d by 1-d/2-d product, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return ensure_finite(a @ b, "matmul output")


def linear(x, weight, bias=None) -> np.ndarray:
    """Affine map y = x W^T + b with weight of shape [out, in].

    Inputs with more than two dimensions are flattened to [batch, features]
    first, so a conv feature map can feed a classifier head directly.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    elif x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    if w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear got input {x.shape} and weight {w.shape}")
    y = x @ w.T
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear bias shape {b.shape} does not match {w.shape[0]} outputs")
        y = y + b
    return ensure_finite(y, "linear output")


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1) -> np.ndarray:
    """Direct 2-d cross-correlation, NCHW input and OIHW weight.

    groups splits input and output channels; groups == C gives a depthwise
    convolution. No dilation. Zero padding.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    groups = int(groups)
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"conv2d groups={groups} incompatible with C={c}, O={o}")
    if cg != c // groups:
        raise ShapeError(f"conv2d weight expects {cg} channels per group, input provides {c // groups}")
    sh, sw = _pair(stride, "stride")
    ph, pw = _pair(padding, "padding")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1 or kh > h + 2 * ph or kw > wd + 2 * pw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{wd} with padding {ph},{pw}")

    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.empty((n, o, oh, ow), dtype=np.float64)
    og = o // groups
    for g in range(groups):
        xg = xp[:, g * cg : (g + 1) * cg]
        wg = w[g * og : (g + 1) * og]
        for i in range(oh):
            for j in range(ow):
                patch = xg[:, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
                out[:, g * og : (g + 1) * og, i, j] = np.einsum("ncij,ocij->no", patch, wg)
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match {o} output channels")
        out += b[None, :, None, None]
    return ensure_finite(out, "conv2d output")


# ---------------------------------------------------------------------------
# Elementwise and structural kernels


def _channel_view(p, c: int, ndim: int) -> np.ndarray:
    """Reshape a per-channel parameter for broadcast along axis 1."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (c,):
        raise ShapeError(f"per-channel parameter has shape {p.shape}, expected ({c},)")
    shape = [1] * ndim
    shape[1] = c
    return p.reshape(shape)


def batchnorm(x, gamma, beta, mean, var, eps=1e-5) -> np.ndarray:
    """Inference-mode batch normalization over channel axis 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError(f"batchnorm expects at least 2-d input, got {x.shape}")
    c = x.shape[1]
    g = _channel_view(gamma, c, x.ndim)
    b = _channel_view(beta, c, x.ndim)
    m = _channel_view(mean, c, x.ndim)
    v = _channel_view(var, c, x.ndim)
    if np.any(np.asarray(var) < 0):
        raise NumericError("batchnorm variance must be non-negative")
    y = g * (x - m) / np.sqrt(v + eps) + b
    return ensure_finite(y, "batchnorm output")


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu6(x) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=np.float64), 0.0, 6.0)


def add(*xs) -> np.ndarray:
    if len(xs) < 2:
        raise ShapeError("add needs at least two inputs")
    arrs = [np.asarray(v, dtype=np.float64) for v in xs]
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ShapeError(f"add inputs disagree on shape: {shape} vs {a.shape}")
    out = arrs[0].copy()
    for a in arrs[1:]:
        out += a
    return ensure_finite(out, "add output")


def concat(xs, axis=1) -> np.ndarray:
    arrs = [np.asarray(v, dtype=np.float64) for v in xs]
    if not arrs:
        raise ShapeError("concat needs at least one input")
    try:
        out = np.concatenate(arrs, axis=int(axis))
    except ValueError as e:
        raise ShapeError(f"concat failed: {e}") from None
    return ensure_finite(out, "concat output")


def _pool_prepare(x, kernel, stride, padding, fill):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"pooling expects 4-d NCHW input, got {x.shape}")
    kh, kw = _pair(kernel, "kernel")
    sh, sw = _pair(kernel if stride is None else stride, "stride")
    ph, pw = _pair(padding, "padding")
    n, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool kernel {kh}x{kw} does not fit input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    return xp, (kh, kw, sh, sw, oh, ow)


def maxpool(x, kernel, stride=None, padding=0) -> np.ndarray:
    xp, (kh, kw, sh, sw, oh, ow) = _pool_prepare(x, kernel, stride, padding, fill=-np.inf)
    n, c = xp.shape[:2]
    out = np.empty((n, c, oh, ow), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
            out[:, :, i, j] = patch.max(axis=(2, 3))
    return ensure_finite(out, "maxpool output")


def avgpool(x, kernel, stride=None, padding=0) -> np.ndarray:
    # Padded positions count toward the average (they contribute zeros).
    xp, (kh, kw, sh, sw, oh, ow) = _pool_prepare(x, kernel, stride, padding, fill=0.0)
    n, c = xp.shape[:2]
    out = np.empty((n, c, oh, ow), dtype=np.float64)
    inv = 1.0 / (kh * kw)
    for i in range(oh):
        for j in range(ow):
            patch = xp[:, :, i * sh : i * sh + kh, j * sw : j * sw + kw]
            out[:, :, i, j] = patch.sum(axis=(2, 3)) * inv
    return ensure_finite(out, "avgpool output")


_ELEMENTWISE = {
    "relu": lambda inputs, attrs: relu(inputs[0]),
    "relu6": lambda inputs, attrs: relu6(inputs[0]),
    "add": lambda inputs, attrs: add(*inputs),
    "concat": lambda inputs, attrs: concat(inputs, axis=attrs.get("axis", 1)),
    "maxpool": lambda inputs, attrs: maxpool(
        inputs[0], attrs["kernel"], attrs.get("stride"), attrs.get("padding", 0)
    ),
    "avgpool": lambda inputs, attrs: avgpool(
        inputs[0], attrs["kernel"], attrs.get("stride"), attrs.get("padding", 0)
    ),
}


def elementwise(kind: str, inputs, **attrs) -> np.ndarray:
    """Dispatch an elementwise or pooling kernel by kind name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ShapeError(f"unknown elementwise kind {kind!r}") from None
    return fn(list(inputs), attrs)
