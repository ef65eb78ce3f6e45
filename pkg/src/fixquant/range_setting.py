"""Range setting: observe tensor statistics, derive quantization encodings.

Two schemes are provided. ``min_max`` uses the observed extrema directly.
``sqnr`` grid-searches clipping thresholds, scoring each candidate by the
expected squared reconstruction error estimated on a fixed-width histogram
of the observed data; rounding noise and clipping error are weighted
equally (the clip weight is a documented, overridable constant).

Accumulators track running min/max plus a histogram. Observing more batches
grows the histogram range as needed; old counts are redistributed
proportionally over the new bins, so the histogram is an approximation of
the full data distribution (exact while the range does not grow). Merging
two accumulators is commutative; associativity holds up to that same
rebinning approximation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import CalibrationError, EncodingError
from .quantizer import QuantEncoding, qdq_tensor

__all__ = [
    "RangeScheme",
    "RangeAccumulator",
    "observe",
    "merge",
    "compute_minmax",
    "compute_sqnr",
    "compute_encodings_from_accumulator",
    "encoding_from_range",
]

HISTOGRAM_BINS = 2048
SQNR_SHRINK_STEPS = 100
# Weight of clipping error relative to rounding error in the sqnr objective.
SQNR_CLIP_WEIGHT = 1.0
# Degenerate observed ranges (max == min) are widened by half their magnitude
# plus this epsilon so the scale stays positive.
DEGENERATE_RANGE_EPS = 1e-5


@dataclass(frozen=True)
class RangeScheme:
    """Calibration policy: which scheme, and whether weights use per-channel grids."""

    kind: str = "min_max"
    per_channel: bool = False
    channel_axis: int = 0

    def __post_init__(self):
        if self.kind not in ("min_max", "sqnr"):
            raise EncodingError(f"unknown range scheme {self.kind!r}")


class _Hist:
    """Running min/max and a fixed-width histogram for one tensor slice."""

    __slots__ = ("bins", "count", "mn", "mx", "counts")

    def __init__(self, bins: int):
        self.bins = bins
        self.count = 0.0
        self.mn = np.inf
        self.mx = -np.inf
        self.counts = np.zeros(bins, dtype=np.float64)

    def edges(self) -> np.ndarray:
        return np.linspace(self.mn, self.mx, self.bins + 1)

    def centers(self) -> np.ndarray:
        e = self.edges()
        return 0.5 * (e[:-1] + e[1:])

    def observe(self, values: np.ndarray) -> None:
        values = values.ravel()
        if values.size == 0:
            return
        bmn = float(values.min())
        bmx = float(values.max())
        new_mn = min(self.mn, bmn)
        new_mx = max(self.mx, bmx)
        if new_mn < self.mn or new_mx > self.mx:
            if self.count:
                self.counts = _rebin(self.counts, self.edges(), new_mn, new_mx, self.bins)
            self.mn, self.mx = new_mn, new_mx
        if self.mx > self.mn:
            hist, _ = np.histogram(values, bins=self.bins, range=(self.mn, self.mx))
            self.counts += hist
        else:
            # All values identical so far: everything lands in the first bin.
            self.counts[0] += values.size
        self.count += values.size

    def merge(self, other: "_Hist") -> "_Hist":
        out = _Hist(self.bins)
        out.count = self.count + other.count
        out.mn = min(self.mn, other.mn)
        out.mx = max(self.mx, other.mx)
        if out.count == 0:
            return out
        if out.mx > out.mn:
            for h in (self, other):
                if not h.count:
                    continue
                if h.mx > h.mn:
                    out.counts += _rebin(h.counts, h.edges(), out.mn, out.mx, out.bins)
                else:
                    idx = min(
                        out.bins - 1,
                        int((h.mn - out.mn) / (out.mx - out.mn) * out.bins),
                    )
                    out.counts[idx] += h.count
        else:
            out.counts[0] = out.count
        return out


def _rebin(counts: np.ndarray, old_edges: np.ndarray, mn: float, mx: float, bins: int) -> np.ndarray:
    """Redistribute histogram counts onto new equal-width bins over [mn, mx].

    Each old bin's count is split over the new bins it overlaps,
    proportionally to overlap length. Preserves the total count.
    """
    new = np.zeros(bins, dtype=np.float64)
    width = (mx - mn) / bins
    old_w = old_edges[1] - old_edges[0]
    if old_w <= 0:
        # Old histogram was a single spike at old_edges[0].
        idx = min(bins - 1, int((old_edges[0] - mn) / width)) if width > 0 else 0
        new[idx] += counts.sum()
        return new
    for i, c in enumerate(counts):
        if c == 0.0:
            continue
        lo = old_edges[i]
        hi = old_edges[i + 1]
        b0 = int(np.clip((lo - mn) / width, 0, bins - 1))
        b1 = int(np.clip((hi - mn) / width, 0, bins - 1))
        if b0 == b1:
            new[b0] += c
            continue
        frac = c / (hi - lo)
        for b in range(b0, b1 + 1):
            seg_lo = max(lo, mn + b * width)
            seg_hi = min(hi, mn + (b + 1) * width)
            if seg_hi > seg_lo:
                new[b] += frac * (seg_hi - seg_lo)
    return new


class RangeAccumulator:
    """Observed statistics for one tensor: per tensor, or per channel."""

    def __init__(self, channel_axis: Optional[int] = None, bins: int = HISTOGRAM_BINS):
        self.channel_axis = channel_axis
        self.bins = bins
        self._hists: Optional[list[_Hist]] = None  # fixed at first observe

    @property
    def per_channel(self) -> bool:
        return self.channel_axis is not None

    @property
    def num_channels(self) -> Optional[int]:
        return None if self._hists is None or not self.per_channel else len(self._hists)

    @property
    def count(self) -> float:
        return 0.0 if self._hists is None else sum(h.count for h in self._hists)

    def channel_stats(self) -> list[tuple[float, float, float]]:
        """(min, max, count) per slice; a single entry for per-tensor."""
        if self._hists is None:
            raise CalibrationError("accumulator has no observations")
        return [(h.mn, h.mx, h.count) for h in self._hists]

    def histograms(self) -> list[_Hist]:
        if self._hists is None:
            raise CalibrationError("accumulator has no observations")
        return self._hists

    def observe(self, x) -> "RangeAccumulator":
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise CalibrationError("cannot calibrate on non-finite values")
        if not self.per_channel:
            if self._hists is None:
                self._hists = [_Hist(self.bins)]
            self._hists[0].observe(x)
            return self
        if not (0 <= self.channel_axis < x.ndim):
            raise CalibrationError(
                f"channel_axis {self.channel_axis} out of range for shape {x.shape}"
            )
        c = x.shape[self.channel_axis]
        if self._hists is None:
            self._hists = [_Hist(self.bins) for _ in range(c)]
        elif len(self._hists) != c:
            raise CalibrationError(
                f"channel count changed between batches: {len(self._hists)} vs {c}"
            )
        per_channel = np.moveaxis(x, self.channel_axis, 0).reshape(c, -1)
        for i in range(c):
            self._hists[i].observe(per_channel[i])
        return self

    def merge(self, other: "RangeAccumulator") -> "RangeAccumulator":
        if self.channel_axis != other.channel_axis or self.bins != other.bins:
            raise CalibrationError("cannot merge accumulators with different layouts")
        out = RangeAccumulator(self.channel_axis, self.bins)
        if self._hists is None:
            out._hists = None if other._hists is None else [h.merge(_Hist(self.bins)) for h in other._hists]
            return out
        if other._hists is None:
            out._hists = [h.merge(_Hist(self.bins)) for h in self._hists]
            return out
        if len(self._hists) != len(other._hists):
            raise CalibrationError("cannot merge accumulators with different channel counts")
        out._hists = [a.merge(b) for a, b in zip(self._hists, other._hists)]
        return out


def observe(acc: RangeAccumulator, x) -> RangeAccumulator:
    """Accumulate one batch of values into the accumulator."""
    return acc.observe(x)


def merge(a: RangeAccumulator, b: RangeAccumulator) -> RangeAccumulator:
    """Combine two accumulators observed on disjoint batches."""
    return a.merge(b)


# ---------------------------------------------------------------------------
# Encoding construction


def _widen_degenerate(mn: float, mx: float) -> tuple[float, float]:
    if mx > mn:
        return mn, mx
    mn = mn - 0.5 * abs(mn) - DEGENERATE_RANGE_EPS
    mx = mx + 0.5 * abs(mx) + DEGENERATE_RANGE_EPS
    return mn, mx


def encoding_from_range(mn: float, mx: float, bitwidth: int, symmetric: bool) -> QuantEncoding:
    """Build an encoding covering [mn, mx].

    Asymmetric grids are widened minimally to contain zero and get an
    integer zero-point; symmetric grids cover max(|mn|, |mx|) and use the
    signed grid when any negative value was seen.
    """
    if not (np.isfinite(mn) and np.isfinite(mx)) or mn > mx:
        raise CalibrationError(f"invalid observed range [{mn}, {mx}]")
    if symmetric:
        r = max(abs(mn), abs(mx))
        signed = mn < 0.0
        levels = 2 ** (bitwidth - 1) - 1 if signed else 2**bitwidth - 1
        # ranges narrower than float32 resolution would snap to a zero scale
        if r == 0.0 or float(np.float32(r / levels)) <= 0.0:
            _, r = _widen_degenerate(0.0, 0.0)
        return QuantEncoding(
            scale=r / levels, zero_point=0, bitwidth=bitwidth, signed=signed, symmetric=True
        )
    lo = min(0.0, mn)
    hi = max(0.0, mx)
    lo, hi = _widen_degenerate(lo, hi)
    scale = (hi - lo) / (2**bitwidth - 1)
    if float(np.float32(scale)) <= 0.0:
        lo, hi = lo - DEGENERATE_RANGE_EPS, hi + DEGENERATE_RANGE_EPS
        scale = (hi - lo) / (2**bitwidth - 1)
    zp = int(np.clip(round_half_away_scalar(-lo / scale), 0, 2**bitwidth - 1))
    return QuantEncoding(scale=scale, zero_point=zp, bitwidth=bitwidth, signed=False, symmetric=False)


def round_half_away_scalar(v: float) -> float:
    return float(np.sign(v) * np.floor(abs(v) + 0.5))


def compute_minmax(acc: RangeAccumulator, bitwidth: int, symmetric: bool):
    """Encodings from observed extrema. Returns a list (one entry per channel)."""
    out = []
    for mn, mx, n in acc.channel_stats():
        if n == 0:
            raise CalibrationError("accumulator slice has no observations")
        out.append(encoding_from_range(mn, mx, bitwidth, symmetric))
    return out


def _estimated_mse(centers: np.ndarray, counts: np.ndarray, enc: QuantEncoding, clip_weight: float) -> float:
    """Expected squared error of qdq over the histogram, error split by region."""
    rec = qdq_tensor(centers, enc)
    err = (rec - centers) ** 2
    if clip_weight != 1.0:
        outside = (centers < enc.grid_min) | (centers > enc.grid_max)
        err = np.where(outside, clip_weight * err, err)
    return float(np.dot(err, counts) / counts.sum())


def _sqnr_single(hist: _Hist, bitwidth: int, symmetric: bool, steps: int, clip_weight: float) -> QuantEncoding:
    mn, mx, n = hist.mn, hist.mx, hist.count
    if n == 0:
        raise CalibrationError("accumulator slice has no observations")
    if mx <= mn:
        return encoding_from_range(mn, mx, bitwidth, symmetric)
    nz = hist.counts > 0
    centers = hist.centers()[nz]
    counts = hist.counts[nz]

    best = None
    best_mse = np.inf
    if symmetric:
        r_full = max(abs(mn), abs(mx))
        for i in range(steps):
            r = r_full * (1.0 - i / steps)
            if r <= 0.0:
                break
            enc = encoding_from_range(-r if mn < 0 else 0.0, r, bitwidth, True)
            mse = _estimated_mse(centers, counts, enc, clip_weight)
            if mse < best_mse:
                best, best_mse = enc, mse
        return best
    # Each side shrinks toward zero (the grid always contains zero); a side
    # that is already at zero contributes a single candidate.
    los = [mn * (1.0 - i / steps) for i in range(steps)] if mn < 0 else [min(0.0, mn)]
    his = [mx * (1.0 - j / steps) for j in range(steps)] if mx > 0 else [max(0.0, mx)]
    for lo in los:
        for hi in his:
            if hi - lo <= 0.0:
                continue
            enc = encoding_from_range(lo, hi, bitwidth, False)
            mse = _estimated_mse(centers, counts, enc, clip_weight)
            if mse < best_mse:
                best, best_mse = enc, mse
    if best is None:
        return encoding_from_range(mn, mx, bitwidth, False)
    return best


def compute_sqnr(
    acc: RangeAccumulator,
    bitwidth: int,
    symmetric: bool,
    steps: int = SQNR_SHRINK_STEPS,
    clip_weight: float = SQNR_CLIP_WEIGHT,
):
    """Encodings minimizing histogram-estimated reconstruction error.

    The candidate grid shrinks each side of the observed range toward zero
    in ``steps`` equal fractions; for every candidate the expected squared
    error of quantize-dequantize is estimated on the accumulated histogram
    and the argmin candidate wins (first minimum on ties, so the result is
    deterministic). Returns a list (one entry per channel).
    """
    return [_sqnr_single(h, bitwidth, symmetric, steps, clip_weight) for h in acc.histograms()]


def compute_encodings_from_accumulator(
    acc: RangeAccumulator, bitwidth: int, symmetric: bool, scheme: RangeScheme
):
    """Dispatch to the scheme named by ``scheme.kind``."""
    if scheme.kind == "sqnr":
        return compute_sqnr(acc, bitwidth, symmetric)
    return compute_minmax(acc, bitwidth, symmetric)
