"""Quantization-aware training.

A small reverse-mode tape over the graph kernels, with the quantizers in
the forward pass and straight-through gradients in the backward pass: the
round() inside quantize-dequantize passes gradients unchanged inside the
grid and zero outside (see ``ste_mask``). Disabled quantizers are skipped
entirely so the tape reproduces the float model bit for bit.

Only what the training loop needs is implemented: gradients for weights
and biases of linear/conv2d layers and for everything on the path between
them. There is no general autograd.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor_core as tc
from .errors import CalibrationError, GraphError, NumericError, ShapeError
from .graph_ir import MAC_KINDS, GraphModel
from .quantizer import QuantizerSpec, qdq, ste_mask
from .quantsim import QuantSimModel, compute_encodings, compute_param_encodings

__all__ = [
    "Tape",
    "forward_with_tape",
    "backward",
    "mse_loss",
    "softmax_cross_entropy",
    "QatOptions",
    "qat_train",
]


@dataclass
class TapeEntry:
    node_id: str
    kind: str
    inputs: list
    saved: dict


@dataclass
class Tape:
    """Recorded forward pass: per-node outputs plus what backward needs."""

    entries: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    output_id: str = ""


def _qdq_with_mask(x: np.ndarray, spec: Optional[QuantizerSpec]) -> tuple[np.ndarray, np.ndarray]:
    if spec is None or not spec.enabled:
        return x, np.ones_like(x)
    return qdq(x, spec), ste_mask(x, spec)


def _pad2d(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _conv2d_patches(x: np.ndarray, kh: int, kw: int, stride: tuple[int, int]):
    """View of all kh x kw patches: (N, C, Ho, Wo, kh, kw)."""
    sh, sw = stride
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    sn, sc, sy, sx = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sy * sh, sx * sw, sy, sx),
        writeable=False,
    )


def conv2d_backward(
    gy: np.ndarray,
    x: np.ndarray,
    w: np.ndarray,
    stride=1,
    padding=0,
    groups: int = 1,
    need_input_grad: bool = True,
) -> tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
    """Gradients of conv2d: (d/dw, d/dx, d/dbias)."""
    stride = tc._pair(stride, "stride")
    padding = tc._pair(padding, "padding")
    w = np.asarray(w, dtype=np.float64)
    oc, icg, kh, kw = w.shape
    xp = _pad2d(np.asarray(x, dtype=np.float64), padding)
    gy = np.asarray(gy, dtype=np.float64)
    ocg = oc // groups

    patches = _conv2d_patches(xp, kh, kw, stride)
    gw = np.empty(w.shape, dtype=np.float64)
    for g in range(groups):
        pg = patches[:, g * icg : (g + 1) * icg]
        gg = gy[:, g * ocg : (g + 1) * ocg]
        gw[g * ocg : (g + 1) * ocg] = np.einsum("nchwkl,nohw->ockl", pg, gg)

    gb = gy.sum(axis=(0, 2, 3))

    gx = None
    if need_input_grad:
        gxp = np.zeros_like(xp)
        sh, sw = stride
        ho, wo = gy.shape[2], gy.shape[3]
        for g in range(groups):
            wg = w[g * ocg : (g + 1) * ocg]  # (ocg, icg, kh, kw)
            gg = gy[:, g * ocg : (g + 1) * ocg]  # (N, ocg, Ho, Wo)
            # Scatter each output position's contribution back onto the pad.
            contrib = np.einsum("nohw,ockl->nchwkl", gg, wg)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, g * icg : (g + 1) * icg, i : i + ho * sh : sh, j : j + wo * sw : sw] += (
                        contrib[:, :, :, :, i, j]
                    )
        ph, pw = padding
        h, wdt = x.shape[2], x.shape[3]
        gx = gxp[:, :, ph : ph + h, pw : pw + wdt]
    return gw, gx, gb


def forward_with_tape(sim: QuantSimModel, inputs) -> Tape:
    """Quantized forward pass recording everything backward() needs."""
    graph = sim.graph
    feed = graph._normalize_inputs(inputs)
    tape = Tape()
    values = tape.values
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        saved: dict = {}
        if node.kind == "input":
            y = np.asarray(feed[nid], dtype=np.float64)
        elif node.kind == "output":
            y = values[node.inputs[0]]
        else:
            xs = [values[s] for s in node.inputs]
            y, saved = _forward_node(sim, node, xs)
        aq = sim.activation_quantizers.get(nid)
        if aq is not None and aq.enabled and node.kind not in ("input", "output"):
            if not aq.ready:
                raise GraphError(f"activation quantizer for {nid} has no encodings")
            y_q, mask = _qdq_with_mask(y, aq)
            saved["act_mask"] = mask
            y = y_q
        values[nid] = y
        tape.entries.append(TapeEntry(nid, node.kind, list(node.inputs), saved))
    tape.output_id = graph.output_ids[0]
    return tape


def _forward_node(sim: QuantSimModel, node, xs: list) -> tuple[np.ndarray, dict]:
    saved: dict = {}
    k = node.kind
    if k == "linear":
        w = node.weights["weight"]
        spec = sim.param_quantizer(node.id, "weight")
        wq, wmask = _qdq_with_mask(w, spec)
        bq, bmask = _qdq_with_mask(node.weights["bias"], sim.param_quantizer(node.id, "bias"))
        x = xs[0]
        if x.ndim != 2:
            saved["orig_shape"] = x.shape
            x = x.reshape(x.shape[0], -1)
        if x.shape[1] != wq.shape[1]:
            raise ShapeError(f"linear {node.id}: input has {x.shape[1]} features, weight expects {wq.shape[1]}")
        saved.update(x=x, wq=wq, wmask=wmask, bmask=bmask)
        return x @ wq.T + bq, saved
    if k == "conv2d":
        w = node.weights["weight"]
        spec = sim.param_quantizer(node.id, "weight")
        wq, wmask = _qdq_with_mask(w, spec)
        bq, bmask = _qdq_with_mask(node.weights["bias"], sim.param_quantizer(node.id, "bias"))
        saved.update(x=xs[0], wq=wq, wmask=wmask, bmask=bmask)
        y = tc.conv2d(
            xs[0],
            wq,
            bq,
            stride=node.attrs.get("stride", 1),
            padding=node.attrs.get("padding", 0),
            groups=node.attrs.get("groups", 1),
        )
        return y, saved
    if k == "batchnorm":
        # Inference-mode affine transform over the same (possibly quantized)
        # statistics the plain simulation uses. Reusing the graph kernel
        # keeps a quantizer-free tape bit-identical to the plain model.
        qw = sim.quantized_weights(node)
        eps = node.attrs.get("eps", 1e-5)
        shape = (1, -1) + (1,) * (xs[0].ndim - 2)
        saved["scale"] = (qw["gamma"] / np.sqrt(qw["var"] + eps)).reshape(shape)
        y = tc.batchnorm(xs[0], qw["gamma"], qw["beta"], qw["mean"], qw["var"], eps=eps)
        return y, saved
    if k == "relu":
        saved["mask"] = (xs[0] > 0).astype(np.float64)
        return tc.relu(xs[0]), saved
    if k == "relu6":
        saved["mask"] = ((xs[0] > 0) & (xs[0] < 6)).astype(np.float64)
        return tc.relu6(xs[0]), saved
    if k == "add":
        return tc.add(*xs), saved
    if k == "concat":
        saved["sizes"] = [x.shape[node.attrs.get("axis", 1)] for x in xs]
        return tc.concat(xs, axis=node.attrs.get("axis", 1)), saved
    if k == "maxpool":
        y, argmax = _maxpool_with_argmax(
            xs[0],
            node.attrs["kernel"],
            node.attrs.get("stride", node.attrs["kernel"]),
            node.attrs.get("padding", 0),
        )
        saved.update(argmax=argmax, in_shape=xs[0].shape)
        return y, saved
    if k == "avgpool":
        saved.update(in_shape=xs[0].shape)
        return tc.avgpool(
            xs[0],
            node.attrs["kernel"],
            stride=node.attrs.get("stride", node.attrs["kernel"]),
            padding=node.attrs.get("padding", 0),
        ), saved
    raise GraphError(f"no training-mode forward for node kind {k!r}")


def _maxpool_with_argmax(x, kernel, stride, padding):
    kernel = tc._pair(kernel, "kernel")
    stride = tc._pair(stride, "stride")
    padding = tc._pair(padding, "padding")
    xp = np.pad(
        np.asarray(x, dtype=np.float64),
        ((0, 0), (0, 0), (padding[0], padding[0]), (padding[1], padding[1])),
        constant_values=-np.inf,
    )
    patches = _conv2d_patches(xp, kernel[0], kernel[1], stride)
    n, c, ho, wo, kh, kw = patches.shape
    flat = patches.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, arg


def backward(sim: QuantSimModel, tape: Tape, gy_out: np.ndarray) -> dict[str, dict[str, np.ndarray]]:
    """Walk the tape in reverse; returns {node_id: {"weight": gW, "bias": gb}}."""
    graph = sim.graph
    grads_y: dict[str, np.ndarray] = {tape.output_id: np.asarray(gy_out, dtype=np.float64)}
    param_grads: dict[str, dict[str, np.ndarray]] = {}

    def _accum(nid: str, g: np.ndarray) -> None:
        if nid in grads_y:
            grads_y[nid] = grads_y[nid] + g
        else:
            grads_y[nid] = g

    for entry in reversed(tape.entries):
        gy = grads_y.get(entry.node_id)
        if gy is None:
            continue
        if "act_mask" in entry.saved:
            gy = gy * entry.saved["act_mask"]
        k, saved = entry.kind, entry.saved
        node = graph.nodes[entry.node_id]
        if k in ("input",):
            continue
        if k == "output":
            _accum(entry.inputs[0], gy)
        elif k == "linear":
            x, wq, wmask = saved["x"], saved["wq"], saved["wmask"]
            gw = (gy.T @ x) * wmask
            gb = gy.sum(axis=0) * saved["bmask"]
            param_grads[entry.node_id] = {"weight": gw, "bias": gb}
            gx = gy @ wq
            if "orig_shape" in saved:
                gx = gx.reshape(saved["orig_shape"])
            _accum(entry.inputs[0], gx)
        elif k == "conv2d":
            gw, gx, gb = conv2d_backward(
                gy,
                saved["x"],
                saved["wq"],
                stride=node.attrs.get("stride", 1),
                padding=node.attrs.get("padding", 0),
                groups=node.attrs.get("groups", 1),
            )
            param_grads[entry.node_id] = {"weight": gw * saved["wmask"], "bias": gb * saved["bmask"]}
            _accum(entry.inputs[0], gx)
        elif k == "batchnorm":
            _accum(entry.inputs[0], gy * saved["scale"])
        elif k in ("relu", "relu6"):
            _accum(entry.inputs[0], gy * saved["mask"])
        elif k == "add":
            for src in entry.inputs:
                _accum(src, gy)
        elif k == "concat":
            axis = node.attrs.get("axis", 1)
            off = 0
            for src, size in zip(entry.inputs, saved["sizes"]):
                sl = [slice(None)] * gy.ndim
                sl[axis] = slice(off, off + size)
                _accum(src, gy[tuple(sl)])
                off += size
        elif k == "maxpool":
            _accum(entry.inputs[0], _maxpool_grad(gy, saved, node.attrs))
        elif k == "avgpool":
            _accum(entry.inputs[0], _avgpool_grad(gy, saved, node.attrs))
        else:
            raise GraphError(f"no backward for node kind {k!r}")
    return param_grads


def _maxpool_grad(gy, saved, attrs):
    kernel = tc._pair(attrs["kernel"], "kernel")
    stride = tc._pair(attrs.get("stride", attrs["kernel"]), "stride")
    padding = tc._pair(attrs.get("padding", 0), "padding")
    n, c, h, w = saved["in_shape"]
    hp, wp = h + 2 * padding[0], w + 2 * padding[1]
    gxp = np.zeros((n, c, hp, wp))
    arg = saved["argmax"]
    ho, wo = arg.shape[2], arg.shape[3]
    ki = arg // kernel[1]
    kj = arg % kernel[1]
    oy = np.arange(ho)[None, None, :, None] * stride[0]
    ox = np.arange(wo)[None, None, None, :] * stride[1]
    rows = (oy + ki).ravel()
    cols = (ox + kj).ravel()
    ni = np.repeat(np.arange(n), c * ho * wo)
    ci = np.tile(np.repeat(np.arange(c), ho * wo), n)
    np.add.at(gxp, (ni, ci, rows, cols), gy.ravel())
    return gxp[:, :, padding[0] : padding[0] + h, padding[1] : padding[1] + w]


def _avgpool_grad(gy, saved, attrs):
    kernel = tc._pair(attrs["kernel"], "kernel")
    stride = tc._pair(attrs.get("stride", attrs["kernel"]), "stride")
    padding = tc._pair(attrs.get("padding", 0), "padding")
    n, c, h, w = saved["in_shape"]
    hp, wp = h + 2 * padding[0], w + 2 * padding[1]
    gxp = np.zeros((n, c, hp, wp))
    ho, wo = gy.shape[2], gy.shape[3]
    share = gy / (kernel[0] * kernel[1])
    for i in range(kernel[0]):
        for j in range(kernel[1]):
            gxp[:, :, i : i + ho * stride[0] : stride[0], j : j + wo * stride[1] : stride[1]] += share
    return gxp[:, :, padding[0] : padding[0] + h, padding[1] : padding[1] + w]


# ---------------------------------------------------------------------------
# Losses


def mse_loss(y: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = y - target
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy over the batch; labels are integer class ids."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.mean(np.log(p[np.arange(n), labels] + 1e-300)))
    g = p.copy()
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class QatOptions:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-2
    lr_decay_every: int = 5
    lr_decay_factor: float = 0.1
    refresh_ranges: bool = False
    log_path: Optional[str] = None


def qat_train(
    sim: QuantSimModel,
    x: np.ndarray,
    y: np.ndarray,
    loss_fn: Callable = softmax_cross_entropy,
    options: QatOptions | None = None,
    seed: int = 0,
) -> list[dict]:
    """Fine-tune the sim's weights through the quantized forward pass.

    Plain SGD on weight and bias tensors. Per epoch: shuffle, iterate
    minibatches, apply gradients; weights stay on the float32 value grid.
    The learning rate divides by 10 every ``lr_decay_every`` epochs. A
    non-finite loss aborts with NumericError. With ``refresh_ranges`` the
    non-frozen quantizer encodings are recomputed from a fresh pass over
    the training data after each epoch, tracking the moving weights.
    Returns the per-epoch log (also written as CSV when requested).
    """
    options = options or QatOptions()
    sim.check_ready()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    if n == 0:
        raise CalibrationError("training data is empty")
    rng = np.random.default_rng(seed)
    graph = sim.graph
    lr = options.learning_rate
    log: list[dict] = []

    for epoch in range(options.epochs):
        if epoch > 0 and options.lr_decay_every > 0 and epoch % options.lr_decay_every == 0:
            lr *= options.lr_decay_factor
        order = rng.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, n, options.batch_size):
            idx = order[start : start + options.batch_size]
            xb, yb = x[idx], y[idx]
            tape = forward_with_tape(sim, xb)
            loss, gy = loss_fn(tape.values[tape.output_id], yb)
            if not math.isfinite(loss):
                raise NumericError(f"training loss is not finite at epoch {epoch}")
            grads = backward(sim, tape, gy)
            for nid, g in grads.items():
                node = graph.nodes[nid]
                node.set_weight("weight", node.weights["weight"] - lr * g["weight"])
                node.set_weight("bias", node.weights["bias"] - lr * g["bias"])
            epoch_loss += loss
            n_batches += 1
        if options.refresh_ranges:
            _refresh_ranges(sim, x)
        log.append({"epoch": epoch, "loss": epoch_loss / max(1, n_batches), "lr": lr})

    if options.log_path:
        with open(options.log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "lr"])
            writer.writeheader()
            for row in log:
                writer.writerow(row)
    return log


def _refresh_ranges(sim: QuantSimModel, x: np.ndarray) -> None:
    """Recompute non-frozen encodings from the current weights and data."""
    compute_param_encodings(
        sim, keys=[k for k, s in sim.param_quantizers.items() if s.enabled and not s.frozen]
    )
    compute_encodings(sim, [x])
