"""Windowed STFT analysis/synthesis, ERB band analysis and anti-alias decimation.

All processing runs on 10 ms hops with a 20 ms power-complementary window,
so analysis -> synthesis reconstructs the input with exactly one hop of
latency. Band analysis uses 32 triangular bands whose centers follow the
ERB-rate scale; per-bin band weights form a partition of unity, which makes
band-energy accounting and gain interpolation exact inverses of each other.
"""

from __future__ import annotations

import numpy as np

SUPPORTED_RATES = (8000, 16000, 48000)
NUM_BANDS = 32


class ConfigError(ValueError):
    """Raised when stream parameters do not match the configured layout."""


def hop_size(rate: int) -> int:
    if rate not in SUPPORTED_RATES:
        raise ConfigError(f"unsupported sample rate {rate}; expected one of {SUPPORTED_RATES}")
    return rate // 100  # 10 ms


def window_size(rate: int) -> int:
    return 2 * hop_size(rate)


def analysis_window(n: int) -> np.ndarray:
    """Power-complementary sine window: w[i]^2 + w[i + n/2]^2 == 1."""
    i = np.arange(n)
    return np.sin(0.5 * np.pi * np.sin(np.pi * (i + 0.5) / n) ** 2)


class StftAnalyzer:
    """Streaming analysis: one hop in, one spectral frame out.

    The transform window covers [previous hop | current hop]; state is the
    previous hop. Single-stream state, not safe for concurrent use.
    """

    def __init__(self, rate: int):
        self.hop = hop_size(rate)
        self.size = 2 * self.hop
        self.window = analysis_window(self.size)
        self._prev = np.zeros(self.hop)
        self.frame_index = -1

    def reset(self):
        self._prev[:] = 0.0
        self.frame_index = -1

    def process(self, frame: np.ndarray) -> np.ndarray:
        if frame.shape[0] != self.hop:
            raise ConfigError(f"expected hop of {self.hop} samples, got {frame.shape[0]}")
        buf = np.concatenate((self._prev, frame))
        self._prev = np.asarray(frame, dtype=float).copy()
        self.frame_index += 1
        return np.fft.rfft(buf * self.window)


class StftSynthesizer:
    """Streaming synthesis: inverse transform, window, overlap-add."""

    def __init__(self, rate: int):
        self.hop = hop_size(rate)
        self.size = 2 * self.hop
        self.window = analysis_window(self.size)
        self._ola = np.zeros(self.hop)

    def reset(self):
        self._ola[:] = 0.0

    def process(self, spec: np.ndarray) -> np.ndarray:
        if spec.shape[0] != self.hop + 1:
            raise ConfigError(f"expected {self.hop + 1} bins, got {spec.shape[0]}")
        frame = np.fft.irfft(spec, n=self.size) * self.window
        out = self._ola + frame[: self.hop]
        self._ola = frame[self.hop:].copy()
        return out


def spectral_energy(spec: np.ndarray, size: int) -> float:
    """Time-domain energy of the frame that produced `spec` (Parseval)."""
    mags = np.abs(spec) ** 2
    return (mags[0] + mags[-1] + 2.0 * mags[1:-1].sum()) / size


def _erb_rate(f_hz):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f_hz, dtype=float))


def _erb_rate_inv(r):
    return (10.0 ** (np.asarray(r, dtype=float) / 21.4) - 1.0) / 0.00437


def _band_centers(top_hz: float, bin_hz: float, count: int = NUM_BANDS) -> np.ndarray:
    """Centers spaced uniformly in ERB rate, subject to one-bin minimum spacing.

    Pure ERB-rate spacing packs the lowest centers closer than one FFT bin,
    which degenerates the low bands, so the ERB step is widened (found by
    bisection) until centers spaced max(one bin, ERB step) land on top_hz.
    """

    def last_center(step):
        c = 0.0
        for _ in range(count - 1):
            c = max(c + bin_hz, _erb_rate_inv(_erb_rate(c) + step))
        return c

    lo, hi = 0.0, float(_erb_rate(top_hz))
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if last_center(mid) < top_hz:
            lo = mid
        else:
            hi = mid
    step = 0.5 * (lo + hi)
    centers = [0.0]
    for _ in range(count - 1):
        c = centers[-1]
        centers.append(max(c + bin_hz, _erb_rate_inv(_erb_rate(c) + step)))
    centers[-1] = top_hz
    return np.array(centers)


class BandLayout:
    """32 triangular bands over rfft bins, forming a partition of unity.

    Bins past the last center keep weight 1 in the last band, so gain
    interpolation covers the whole spectrum.
    """

    def __init__(self, rate: int, fft_size: int | None = None):
        if fft_size is None:
            fft_size = window_size(rate)
        self.rate = rate
        self.fft_size = fft_size
        self.num_bins = fft_size // 2 + 1
        bin_hz = rate / fft_size
        top_hz = 20000.0 if rate == 48000 else rate / 2.0
        self.centers_hz = _band_centers(top_hz, bin_hz)
        freqs = np.arange(self.num_bins) * bin_hz
        w = np.zeros((NUM_BANDS, self.num_bins))
        c = self.centers_hz
        for b in range(NUM_BANDS - 1):
            lo, hi = c[b], c[b + 1]
            sel = (freqs >= lo) & (freqs < hi)
            frac = (freqs[sel] - lo) / (hi - lo)
            w[b, sel] = 1.0 - frac
            w[b + 1, sel] = frac
        w[NUM_BANDS - 1, freqs >= c[-1]] = 1.0
        self.weights = w

    def band_energies(self, spec: np.ndarray) -> np.ndarray:
        if spec.shape[0] != self.num_bins:
            raise ConfigError(f"expected {self.num_bins} bins, got {spec.shape[0]}")
        power = spec.real ** 2 + spec.imag ** 2
        return self.weights @ power

    def band_inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Per-band real part of the inner product <a, b>."""
        cross = a.real * b.real + a.imag * b.imag
        return self.weights @ cross

    def interpolate(self, values: np.ndarray) -> np.ndarray:
        """Per-bin curve from per-band values (piecewise linear across centers)."""
        if values.shape[0] != NUM_BANDS:
            raise ConfigError(f"expected {NUM_BANDS} band values, got {values.shape[0]}")
        return values @ self.weights

    def to_table(self) -> str:
        """Text table of the layout, one band per line, for test fixtures."""
        lines = [f"# band layout rate={self.rate} fft={self.fft_size} bands={NUM_BANDS}"]
        for b in range(NUM_BANDS):
            nz = np.nonzero(self.weights[b])[0]
            span = f"{nz[0]}..{nz[-1]}" if nz.size else "-"
            lines.append(f"{b:2d} center_hz={self.centers_hz[b]:.3f} bins={span}")
        return "\n".join(lines)


class FirDecimator:
    """Streaming anti-alias low-pass + decimation by an integer factor.

    The 2x path (16 kHz -> 8 kHz) uses a 32-tap linear-phase FIR with a
    3.6 kHz cutoff; other factors scale the design to keep the same
    passband. Input hops must be multiples of the factor.
    """

    def __init__(self, factor: int, in_rate: int):
        from scipy.signal import firwin

        self.factor = factor
        ntaps = 16 * factor
        cutoff = 3600.0 / (in_rate / 2.0)
        self.taps = firwin(ntaps, cutoff)
        self._hist = np.zeros(ntaps - 1)

    def reset(self):
        self._hist[:] = 0.0

    def process(self, frame: np.ndarray) -> np.ndarray:
        if frame.shape[0] % self.factor:
            raise ConfigError(f"frame length {frame.shape[0]} not a multiple of {self.factor}")
        buf = np.concatenate((self._hist, frame))
        out = np.convolve(buf, self.taps, mode="valid")
        self._hist = buf[buf.shape[0] - (self.taps.shape[0] - 1):].copy()
        return out[:: self.factor]
