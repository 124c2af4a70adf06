"""Pitch tracking, non-causal comb filtering and per-band pitch coherence.

The search covers 62.5-500 Hz with a continuity bias against octave jumps.
The comb filter spans two pitch periods on either side of the current frame;
the two future periods fit inside the engine's fixed look-ahead, and taps
that would reach past it are dropped with the kernel re-normalized.
"""

from __future__ import annotations

import numpy as np

# Hann-shaped 5-tap kernel (k = -2..2), sums to 1.
COMB_KERNEL = np.array([0.0625, 0.25, 0.375, 0.25, 0.0625])
COMB_SPAN = 2
CONTINUITY_BASE = 0.85
SUBHARMONIC_RATIO = 0.85
SILENCE_FLOOR = 1e-9


class HistoryBuffer:
    """Sliding window of the most recent samples of one stream."""

    def __init__(self, length: int):
        self.data = np.zeros(length)

    def push(self, frame: np.ndarray):
        n = frame.shape[0]
        self.data[:-n] = self.data[n:]
        self.data[-n:] = frame


class PitchTracker:
    """Single-stream pitch state; `update` consumes the newest history."""

    def __init__(self, rate: int):
        self.rate = rate
        self.tmin, self.tmax = rate // 500, int(rate / 62.5)
        self.window = 2 * (rate // 100)
        self.period = (self.tmin + self.tmax) // 2
        self.corr = 0.0
        # coarse stride keeps the 48 kHz search no costlier than 16 kHz
        self.stride = max(1, rate // 16000)

    def history_length(self, lookahead_frames: int) -> int:
        hop = self.rate // 100
        return 2 * self.tmax + (lookahead_frames + 1) * hop

    def update(self, buf: np.ndarray) -> tuple[int, float]:
        """Search the newest window (which already includes the look-ahead)."""
        seg = buf[-self.window:]
        e_seg = float(seg @ seg)
        if e_seg / self.window < SILENCE_FLOOR:
            self.corr = 0.0
            return self.period, self.corr

        tail = buf[-(self.window + self.tmax):]
        nums = np.correlate(tail, seg, mode="valid")  # index k <-> lag tmax-k
        sq = np.concatenate(([0.0], np.cumsum(tail * tail)))
        e_ref = sq[self.window:] - sq[: self.tmax + 1]
        lags = self.tmax - np.arange(self.tmax + 1)
        corr = nums / np.sqrt(e_seg * e_ref + 1e-30)

        cand_lags = np.arange(self.tmin, self.tmax + 1, self.stride)
        cval = corr[self.tmax - cand_lags]
        bias = CONTINUITY_BASE ** np.abs(np.log2(cand_lags / self.period))
        best = cand_lags[int(np.argmax(cval * bias))]
        if self.stride > 1:
            lo = max(self.tmin, best - self.stride)
            hi = min(self.tmax, best + self.stride)
            fine = np.arange(lo, hi + 1)
            fval = corr[self.tmax - fine]
            fbias = CONTINUITY_BASE ** np.abs(np.log2(fine / self.period))
            best = fine[int(np.argmax(fval * fbias))]
        # suppress period doubling: prefer the half lag when it scores close
        half = best // 2
        if half >= self.tmin and corr[self.tmax - half] > SUBHARMONIC_RATIO * corr[self.tmax - best]:
            best = half
        self.period = int(best)
        self.corr = float(np.clip(corr[self.tmax - best], -1.0, 1.0))
        return self.period, self.corr


def comb_filter(buf: np.ndarray, period: int, hop: int, lookahead: int) -> np.ndarray:
    """Comb-filter the frame that sits `lookahead` samples before the buffer end.

    Future taps that would reach beyond the available look-ahead are dropped
    and the kernel re-normalized, so the output is always a convex average.
    """
    start = buf.shape[0] - lookahead - hop
    taps = []
    weights = []
    for k in range(-COMB_SPAN, COMB_SPAN + 1):
        if k < 0 and -k * period > lookahead:
            continue
        taps.append(k)
        weights.append(COMB_KERNEL[k + COMB_SPAN])
    w = np.asarray(weights) / np.sum(weights)
    out = np.zeros(hop)
    for k, wk in zip(taps, w):
        s = start - k * period
        out += wk * buf[s: s + hop]
    return out


def band_coherence(y_spec, c_spec, layout):
    """Per-band normalized correlation of a spectrum with its comb-filtered
    version, clamped to [0, 1]; zero-energy bands give 0."""
    ey = layout.band_energies(y_spec)
    ec = layout.band_energies(c_spec)
    cross = layout.band_inner(y_spec, c_spec)
    denom = np.sqrt(ey * ec)
    q = np.where(denom > 1e-30, cross / np.maximum(denom, 1e-30), 0.0)
    return np.clip(q, 0.0, 1.0)
