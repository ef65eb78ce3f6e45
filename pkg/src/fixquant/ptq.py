"""Post-training quantization transforms.

All transforms copy the model and return the rewritten copy; the input
model is never mutated. The pieces:

* batch-norm folding into the preceding linear/conv layer,
* relu6 -> relu replacement,
* cross-layer equalization of consecutive MAC-layer pairs, with optional
  high-bias absorption when folded batch-norm statistics are available,
* bias correction (empirical, or analytic with empirical fallback),
* weight rounding optimization (adaround),
* a standard pipeline wiring those into a calibrated simulation.

Folding attaches the batch-norm's output statistics to the receiving layer
under ``attrs["folded_bn"]``; equalization keeps them in sync when it
rescales channels. Both high-bias absorption and analytic bias correction
consume those statistics and skip (with a report entry) when they are gone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor_core as tc
from .errors import CalibrationError, EncodingError, GraphError
from .graph_ir import MAC_KINDS, GraphModel, eval_kind
from .quantizer import QuantizerSpec, qdq, round_half_away
from .quantsim import (
    QuantSimModel,
    SimConfig,
    compute_encodings,
    create_quantsim,
    encodings_to_dict,
    import_encodings,
)
from .range_setting import RangeAccumulator, RangeScheme, compute_encodings_from_accumulator

__all__ = [
    "fold_batch_norms",
    "replace_relu6_with_relu",
    "equalize_model",
    "CLEReport",
    "bias_correct",
    "AdaRoundParams",
    "adaround",
    "PtqOptions",
    "run_ptq_pipeline",
]

BN_DEFAULT_EPS = 1e-5


# ---------------------------------------------------------------------------
# Batch-norm folding


def _fold_into(layer, bn) -> None:
    """Fold bn (applied after ``layer``) into the layer's weight and bias."""
    gamma = bn.weights["gamma"]
    beta = bn.weights["beta"]
    mean = bn.weights["mean"]
    var = bn.weights["var"]
    eps = bn.attrs.get("eps", BN_DEFAULT_EPS)
    inv_std = gamma / np.sqrt(var + eps)

    w = layer.weights["weight"]
    b = layer.weights["bias"]
    if layer.kind == "linear":
        layer.set_weight("weight", w * inv_std[:, None])
    else:  # conv2d, output channels on axis 0
        layer.set_weight("weight", w * inv_std[:, None, None, None])
    layer.set_weight("bias", beta + inv_std * (b - mean))
    # Post-fold output distribution per channel: mean beta, spread |gamma|.
    layer.attrs["folded_bn"] = {
        "beta": [float(v) for v in beta],
        "gamma": [float(abs(v)) for v in gamma],
    }


def fold_batch_norms(model: GraphModel) -> GraphModel:
    folded, _ = fold_batch_norms_detailed(model)
    return folded


def fold_batch_norms_detailed(model: GraphModel) -> tuple[GraphModel, dict]:
    """Fold every batchnorm that directly follows a linear/conv2d layer.

    A batchnorm is foldable when its single input is a MAC layer whose
    output feeds only that batchnorm. Others are left in place and listed
    in the report. Returns (new model, {"folded": [...], "skipped": [...]}).
    """
    out = model.copy()
    consumers = out.consumers()
    report = {"folded": [], "skipped": []}
    for nid in list(out.topo_order()):
        node = out.nodes.get(nid)
        if node is None or node.kind != "batchnorm":
            continue
        src = out.nodes[node.inputs[0]]
        if src.kind not in MAC_KINDS or consumers[src.id] != [nid]:
            report["skipped"].append(nid)
            continue
        _fold_into(src, node)
        for cid in consumers[nid]:
            cons = out.nodes[cid]
            cons.inputs = [src.id if x == nid else x for x in cons.inputs]
        del out.nodes[nid]
        report["folded"].append({"layer": src.id, "batchnorm": nid})
        consumers = out.consumers()
    return GraphModel(list(out.nodes.values()), name=out.name), report


def replace_relu6_with_relu(model: GraphModel) -> GraphModel:
    """Rewrite every relu6 node into a relu (a clipped activation blocks
    cross-layer scaling, since relu6(s*x) != s*relu6(x))."""
    out = model.copy()
    for node in out.nodes.values():
        if node.kind == "relu6":
            node.kind = "relu"
    return out


# ---------------------------------------------------------------------------
# Cross-layer equalization


@dataclass
class CLEReport:
    folded: list = field(default_factory=list)
    skipped_batchnorms: list = field(default_factory=list)
    pairs: list = field(default_factory=list)
    absorbed: list = field(default_factory=list)
    absorption_skipped: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "folded": self.folded,
            "skipped_batchnorms": self.skipped_batchnorms,
            "pairs": self.pairs,
            "absorbed": self.absorbed,
            "absorption_skipped": self.absorption_skipped,
        }


def _out_channel_ranges(node) -> np.ndarray:
    """Per-output-channel max |w|."""
    w = node.weights["weight"]
    return np.abs(w).max(axis=tuple(range(1, w.ndim)))


def _in_channel_ranges(node) -> Optional[np.ndarray]:
    """Per-input-channel max |w|, or None if the layout is not scalable."""
    w = node.weights["weight"]
    if node.kind == "linear":
        return np.abs(w).max(axis=0)
    groups = node.attrs.get("groups", 1)
    if groups == 1:
        return np.abs(w).max(axis=(0, 2, 3))
    if w.shape[0] == groups and w.shape[1] == 1:  # depthwise
        return np.abs(w).max(axis=(1, 2, 3))
    return None


def _scale_input_channels(node, s: np.ndarray) -> None:
    w = node.weights["weight"]
    if node.kind == "linear":
        node.set_weight("weight", w * s[None, :])
        return
    groups = node.attrs.get("groups", 1)
    if groups == 1:
        node.set_weight("weight", w * s[None, :, None, None])
    else:  # depthwise
        node.set_weight("weight", w * s[:, None, None, None])


def _scale_output_channels(node, s: np.ndarray) -> None:
    w = node.weights["weight"]
    node.set_weight("weight", w / s.reshape((-1,) + (1,) * (w.ndim - 1)))
    node.set_weight("bias", node.weights["bias"] / s)
    st = node.attrs.get("folded_bn")
    if st is not None:
        st["beta"] = [float(b / si) for b, si in zip(st["beta"], s)]
        st["gamma"] = [float(g / si) for g, si in zip(st["gamma"], s)]


def _find_pairs(model: GraphModel) -> list[tuple[str, Optional[str], str]]:
    """(layer1, optional relu between, layer2) chains eligible for scaling."""
    consumers = model.consumers()
    pairs = []
    for nid in model.topo_order():
        a = model.nodes[nid]
        if a.kind not in MAC_KINDS:
            continue
        cons = consumers[nid]
        if len(cons) != 1:
            continue
        mid = None
        b = model.nodes[cons[0]]
        if b.kind == "relu":
            if len(consumers[b.id]) != 1:
                continue
            mid = b.id
            b = model.nodes[consumers[b.id][0]]
        if b.kind not in MAC_KINDS:
            continue
        r2 = _in_channel_ranges(b)
        if r2 is None or len(_out_channel_ranges(a)) != len(r2):
            continue
        pairs.append((a.id, mid, b.id))
    return pairs


def cross_layer_scale(model: GraphModel, report: CLEReport) -> GraphModel:
    """One pass of pairwise channel rescaling, in topological order.

    For each eligible pair the per-channel factor s_i = sqrt(r1_i * r2_i) / r2_i
    equalizes the weight ranges: channel i of layer 1 is divided by s_i
    (bias included) and the matching input channel of layer 2 multiplied by
    s_i. With a relu in between the function is preserved exactly.
    """
    out = model.copy()
    for a_id, mid, b_id in _find_pairs(out):
        a, b = out.nodes[a_id], out.nodes[b_id]
        r1 = _out_channel_ranges(a)
        r2 = _in_channel_ranges(b)
        s = np.ones_like(r1)
        ok = (r1 > 0) & (r2 > 0)
        s[ok] = np.sqrt(r1[ok] * r2[ok]) / r2[ok]
        _scale_output_channels(a, s)
        _scale_input_channels(b, s)
        report.pairs.append(
            {
                "layer1": a_id,
                "layer2": b_id,
                "relu_between": mid,
                "scale": [float(v) for v in s],
                "r1_before": [float(v) for v in r1],
                "r2_before": [float(v) for v in r2],
                "r1_after": [float(v) for v in _out_channel_ranges(a)],
                "r2_after": [float(v) for v in _in_channel_ranges(b)],
            }
        )
    return out


def absorb_high_bias(model: GraphModel, report: CLEReport) -> GraphModel:
    """Move large positive biases across a relu into the next layer.

    For a (layer1, relu, layer2) chain whose layer1 carries folded
    batch-norm statistics, the absorbable amount per channel is
    c = max(0, beta - 3 * gamma): almost all pre-activations exceed c, so
    relu(y) ~= relu(y - c) + c and the shift folds into layer2's bias
    exactly for linear consumers (approximately at padded conv borders).
    Pairs without statistics or without a relu are skipped and reported.
    """
    out = model.copy()
    for a_id, mid, b_id in _find_pairs(out):
        a, b = out.nodes[a_id], out.nodes[b_id]
        if mid is None:
            report.absorption_skipped.append({"layer1": a_id, "reason": "no relu between layers"})
            continue
        st = a.attrs.get("folded_bn")
        if st is None:
            report.absorption_skipped.append(
                {"layer1": a_id, "reason": "no batch-norm statistics available"}
            )
            continue
        beta = np.asarray(st["beta"], dtype=np.float64)
        gamma = np.asarray(st["gamma"], dtype=np.float64)
        c = np.maximum(0.0, beta - 3.0 * gamma)
        if not np.any(c > 0):
            report.absorption_skipped.append({"layer1": a_id, "reason": "no high bias (c == 0)"})
            continue
        a.set_weight("bias", a.weights["bias"] - c)
        st["beta"] = [float(v) for v in beta - c]
        w2 = b.weights["weight"]
        if b.kind == "linear":
            shift = w2 @ c
        elif b.attrs.get("groups", 1) == 1:
            shift = np.einsum("oikl,i->o", w2, c)
        else:  # depthwise
            shift = w2.sum(axis=(1, 2, 3)) * c
        b.set_weight("bias", b.weights["bias"] + shift)
        report.absorbed.append({"layer1": a_id, "layer2": b_id, "absorbed": [float(v) for v in c]})
    return out


def equalize_model(model: GraphModel) -> tuple[GraphModel, CLEReport]:
    """Full cross-layer equalization.

    Folds batch norms, replaces relu6 with relu, runs one pass of
    cross-layer scaling, then absorbs high biases where statistics allow.
    """
    report = CLEReport()
    out, fold_rep = fold_batch_norms_detailed(model)
    report.folded = fold_rep["folded"]
    report.skipped_batchnorms = fold_rep["skipped"]
    out = replace_relu6_with_relu(out)
    out = cross_layer_scale(out, report)
    out = absorb_high_bias(out, report)
    return out, report


# ---------------------------------------------------------------------------
# Bias correction


def _norm_cdf(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.array([math.erf(v / math.sqrt(2.0)) for v in np.atleast_1d(t)]))


def _rectified_gaussian_mean(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """E[relu(z)] for z ~ N(mu, sigma^2), per channel."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    out = np.maximum(mu, 0.0)
    ok = sigma > 0
    if np.any(ok):
        t = mu[ok] / sigma[ok]
        phi = np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
        out[ok] = mu[ok] * _norm_cdf(t) + sigma[ok] * phi
    return out


def _channel_means(y: np.ndarray) -> np.ndarray:
    """Mean over batch (and spatial dims for 4-d maps), per output channel."""
    if y.ndim == 4:
        return y.mean(axis=(0, 2, 3))
    return y.mean(axis=0)


def _limit_samples(batches: list, limit: int) -> list:
    out, seen = [], 0
    for b in batches:
        arr = b if not isinstance(b, dict) else next(iter(b.values()))
        out.append(b)
        seen += np.asarray(arr).shape[0]
        if seen >= limit:
            break
    return out


def _weight_quant_error(sim: QuantSimModel, node) -> np.ndarray:
    spec = sim.param_quantizer(node.id, "weight")
    w = node.weights["weight"]
    return (qdq(w, spec) if spec is not None else w) - w


def _analytic_input_mean(sim: QuantSimModel, node) -> Optional[np.ndarray]:
    """E[input] per channel from the producer's folded batch-norm statistics."""
    graph = sim.graph
    src = graph.nodes[node.inputs[0]]
    through_relu = False
    if src.kind == "relu":
        through_relu = True
        src = graph.nodes[src.inputs[0]]
    st = src.attrs.get("folded_bn") if src.kind in MAC_KINDS else None
    if st is None:
        return None
    beta = np.asarray(st["beta"], dtype=np.float64)
    gamma = np.asarray(st["gamma"], dtype=np.float64)
    return _rectified_gaussian_mean(beta, gamma) if through_relu else beta


def _apply_weight_error_correction(node, err_w: np.ndarray, ex: np.ndarray) -> np.ndarray:
    if node.kind == "linear":
        return err_w @ ex
    if node.attrs.get("groups", 1) == 1:
        return np.einsum("oikl,i->o", err_w, ex)
    return err_w.sum(axis=(1, 2, 3)) * ex


def bias_correct(
    sim: QuantSimModel,
    mode: str = "empirical",
    feed=None,
    num_samples: int = 512,
) -> GraphModel:
    """Shift layer biases so quantization does not move mean pre-activations.

    ``empirical`` measures, for each MAC layer in topological order, the
    mean float pre-activation and the mean pre-activation of the running
    quantized model (raw accumulator output, before the output quantizer),
    and adds the difference to the bias. ``analytic_then_empirical``
    removes the weight-quantization component in closed form for layers
    whose input mean follows from folded batch-norm statistics (rectified
    Gaussian mean through a relu) and falls back to the empirical estimate
    elsewhere. Mutates the sim's graph and returns it.
    """
    if mode not in ("empirical", "analytic_then_empirical"):
        raise EncodingError(f"unknown bias correction mode {mode!r}")
    graph = sim.graph
    targets = [nid for nid in graph.topo_order() if graph.nodes[nid].kind in MAC_KINDS]

    analytic_done: dict[str, bool] = {}
    if mode == "analytic_then_empirical":
        for nid in targets:
            node = graph.nodes[nid]
            ex = _analytic_input_mean(sim, node)
            if ex is None:
                analytic_done[nid] = False
                continue
            err = _apply_weight_error_correction(node, _weight_quant_error(sim, node), ex)
            node.set_weight("bias", node.weights["bias"] - err)
            analytic_done[nid] = True
        remaining = [nid for nid in targets if not analytic_done[nid]]
    else:
        remaining = list(targets)

    if remaining:
        if feed is None:
            raise CalibrationError(
                f"bias correction needs calibration data for layers {remaining}"
            )
        batches = _limit_samples(list(feed), num_samples)
        if not batches:
            raise CalibrationError("bias correction feed is empty")
        fp_means: dict[str, list[np.ndarray]] = {nid: [] for nid in remaining}
        for batch in batches:
            values = graph.evaluate_all(batch)
            for nid in remaining:
                fp_means[nid].append(_channel_means(values[nid]))
        fp_mean = {nid: np.mean(np.stack(v), axis=0) for nid, v in fp_means.items()}

        # Correct in topological order against the running quantized model:
        # earlier corrections are in place before later layers are measured.
        for nid in remaining:
            q_means = []
            for batch in batches:
                _, raw = sim.evaluate_all(batch, capture_raw=True)
                q_means.append(_channel_means(raw[nid]))
            delta = fp_mean[nid] - np.mean(np.stack(q_means), axis=0)
            node = graph.nodes[nid]
            node.set_weight("bias", node.weights["bias"] + delta)
    return graph


# ---------------------------------------------------------------------------
# AdaRound


@dataclass
class AdaRoundParams:
    """Settings for the rounding optimization.

    ``num_batches`` defaults to every batch the feed provides. Iterations
    run plain stochastic gradient descent with a fixed step on the
    continuous rounding variables; the rounding regularizer's sharpness
    ``beta`` anneals on a cosine from beta_range[0] to beta_range[1] once
    the warm-start fraction of iterations has passed.
    """

    num_batches: Optional[int] = None
    num_iterations: int = 10_000
    reg_param: float = 0.01
    beta_range: tuple[float, float] = (20.0, 2.0)
    warm_start: float = 0.2
    step_size: float = 1e-2


_SIG_ZETA = 1.2  # rectified sigmoid stretch
_SIG_GAMMA = -0.1  # rectified sigmoid lower shift


def _rect_sigmoid(v: np.ndarray) -> np.ndarray:
    return np.clip(_SIG_ZETA / (1.0 + np.exp(-v)) + _SIG_GAMMA, 0.0, 1.0)


def _rect_sigmoid_grad(v: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-v))
    inside = _SIG_ZETA * sig + _SIG_GAMMA
    return np.where((inside > 0.0) & (inside < 1.0), _SIG_ZETA * sig * (1.0 - sig), 0.0)


def _beta_at(it: int, params: AdaRoundParams) -> float:
    start = int(params.warm_start * params.num_iterations)
    hi, lo = params.beta_range
    if it < start or params.num_iterations <= start:
        return hi
    t = (it - start) / max(1, params.num_iterations - start)
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(t * math.pi))


def _layer_forward(node, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    weights = dict(node.weights)
    weights["weight"] = w
    return eval_kind(node.kind, node.attrs, weights, [x])


def _layer_weight_grad(node, x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """d(loss)/dW given upstream gradient gy on the layer output."""
    if node.kind == "linear":
        xf = x.reshape(x.shape[0], -1) if x.ndim != 2 else x
        return gy.T @ xf
    from .qat import conv2d_backward  # local import to avoid a module cycle

    gw, _, _ = conv2d_backward(
        gy,
        x,
        node.weights["weight"],
        stride=node.attrs.get("stride", 1),
        padding=node.attrs.get("padding", 0),
        groups=node.attrs.get("groups", 1),
        need_input_grad=False,
    )
    return gw


def adaround(
    model: GraphModel,
    feed,
    params: AdaRoundParams | None = None,
    param_bw: int = 8,
    scheme: RangeScheme | None = None,
    seed: int = 0,
    encodings_path=None,
) -> tuple[GraphModel, dict]:
    """Optimize each layer's weight rounding instead of rounding to nearest.

    Layers are visited in topological order. For each linear/conv layer a
    weight encoding is derived (symmetric, ``param_bw`` bits, given scheme),
    the weight is split into floor(w / s) plus a learnable offset in [0, 1]
    parameterized by a rectified sigmoid, and the offset is trained to
    minimize reconstruction error of the layer's output plus a regularizer
    that pushes every offset to a hard 0 or 1. Layer inputs come from the
    already-rounded predecessor chain. Final weights snap to
    floor + {0, 1} on the grid and the frozen per-layer encodings are
    returned (and written to ``encodings_path`` when given).

    Returns (rounded model, encodings document).
    """
    params = params or AdaRoundParams()
    scheme = scheme or RangeScheme(kind="sqnr")
    batches = list(feed)
    if not batches:
        raise CalibrationError("adaround feed is empty")
    n_batches = params.num_batches or len(batches)
    if len(batches) < n_batches:
        raise CalibrationError(f"adaround needs {n_batches} batches, feed provides {len(batches)}")
    batches = batches[:n_batches]
    rng = np.random.default_rng(seed)

    out = model.copy()
    param_encodings: dict[str, list] = {}
    targets = [nid for nid in out.topo_order() if out.nodes[nid].kind in MAC_KINDS]

    for nid in targets:
        node = out.nodes[nid]
        w = node.weights["weight"]

        acc = RangeAccumulator(channel_axis=scheme.channel_axis if scheme.per_channel else None)
        acc.observe(w)
        encs = compute_encodings_from_accumulator(acc, param_bw, symmetric=True, scheme=scheme)
        if scheme.per_channel:
            shape = [1] * w.ndim
            shape[scheme.channel_axis] = len(encs)
            s = np.array([e.scale for e in encs]).reshape(shape)
            zp = np.array([float(e.zero_point) for e in encs]).reshape(shape)
            q_lo = np.array([float(e.q_lo) for e in encs]).reshape(shape)
            q_hi = np.array([float(e.q_hi) for e in encs]).reshape(shape)
        else:
            e = encs[0]
            s, zp = e.scale, float(e.zero_point)
            q_lo, q_hi = float(e.q_lo), float(e.q_hi)

        w_floor = np.floor(w / s)
        # Start the soft offset at the plain rounding residual.
        rest = np.clip(w / s - w_floor, 1e-4, 1.0 - 1e-4)
        v = np.log((rest - _SIG_GAMMA) / (_SIG_ZETA - _SIG_GAMMA - rest + _SIG_GAMMA))

        # Inputs from the already-rounded predecessor chain, targets from the
        # original float weight applied to those same inputs.
        xs = []
        for batch in batches:
            values = out.evaluate_all(batch)
            xs.append(np.asarray(values[node.inputs[0]], dtype=np.float64))
        targets_y = [_layer_forward(node, w, x) for x in xs]

        for it in range(params.num_iterations):
            bi = int(rng.integers(0, len(xs)))
            x, y_ref = xs[bi], targets_y[bi]
            h = _rect_sigmoid(v)
            w_int = np.clip(w_floor + zp + h, q_lo, q_hi)
            w_soft = s * (w_int - zp)
            y = _layer_forward(node, w_soft, x)
            diff = y - y_ref
            gy = (2.0 / diff.size) * diff
            g_wsoft = _layer_weight_grad(node, x, gy)
            inside = (w_floor + zp + h > q_lo) & (w_floor + zp + h < q_hi)
            g_h = g_wsoft * s * inside

            beta = _beta_at(it, params)
            if it >= int(params.warm_start * params.num_iterations):
                t = np.abs(2.0 * h - 1.0)
                g_h = g_h - params.reg_param * beta * np.power(t, beta - 1.0) * 2.0 * np.sign(
                    2.0 * h - 1.0
                )
            v = v - params.step_size * g_h * _rect_sigmoid_grad(v)

        h_final = (_rect_sigmoid(v) >= 0.5).astype(np.float64)
        w_int = np.clip(w_floor + zp + h_final, q_lo, q_hi)
        node.set_weight("weight", s * (w_int - zp))
        param_encodings[f"{nid}.weight"] = [
            {
                "bitwidth": e.bitwidth,
                "scale": e.scale,
                "offset": e.zero_point,
                "symmetric": e.symmetric,
                "signed": e.signed,
                "min": e.grid_min,
                "max": e.grid_max,
                "frozen": True,
            }
            for e in encs
        ]

    doc = {
        "format": "fixquant-encodings-v1",
        "activation_encodings": {},
        "param_encodings": param_encodings,
    }
    if encodings_path is not None:
        Path(encodings_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out, doc


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class PtqOptions:
    """Switches and settings for the standard pipeline."""

    param_bw: int = 8
    output_bw: int = 8
    scheme: RangeScheme = field(default_factory=lambda: RangeScheme(kind="sqnr"))
    config: Optional[SimConfig] = None
    use_cle: bool = True
    use_adaround: bool = True
    use_bias_correction: bool = False
    bias_correction_mode: str = "empirical"
    num_bias_correct_samples: int = 512
    adaround_params: AdaRoundParams = field(default_factory=AdaRoundParams)
    seed: int = 0


def run_ptq_pipeline(model: GraphModel, feed, options: PtqOptions | None = None) -> QuantSimModel:
    """Equalize, round, calibrate: the standard post-training recipe.

    Steps, each optional through ``options``: cross-layer equalization;
    adaround on the calibration feed (writing frozen weight encodings);
    simulation construction at the requested bitwidths; weight and
    activation range calibration; bias correction against the calibrated
    simulation. Returns the ready-to-run simulation.
    """
    options = options or PtqOptions()
    feed = list(feed)
    work = model
    if options.use_cle:
        work, _ = equalize_model(work)

    frozen_doc = None
    if options.use_adaround:
        work, frozen_doc = adaround(
            work,
            feed,
            params=options.adaround_params,
            param_bw=options.param_bw,
            scheme=options.scheme,
            seed=options.seed,
        )

    sim = create_quantsim(
        work,
        default_param_bw=options.param_bw,
        default_output_bw=options.output_bw,
        scheme=options.scheme,
        config=options.config,
    )
    if frozen_doc is not None:
        for key, entries in frozen_doc["param_encodings"].items():
            if key in sim.param_quantizers:
                spec = sim.param_quantizers[key]
                from .quantsim import _encoding_from_json

                encs = [_encoding_from_json(d) for d in entries]
                if len(encs) > 1 and not spec.per_channel:
                    spec.channel_axis = 0
                elif len(encs) == 1 and spec.per_channel:
                    spec.channel_axis = None
                spec.symmetric = encs[0].symmetric
                spec.set_encodings(encs, frozen=True)
    compute_encodings(sim, feed)
    if options.use_bias_correction:
        bias_correct(
            sim,
            mode=options.bias_correction_mode,
            feed=feed,
            num_samples=options.num_bias_correct_samples,
        )
    return sim
