"""Multidelay block frequency-domain echo canceller.

The echo path is modeled by K hop-sized partitions updated in the frequency
domain (overlap-save, so the filter output is exact linear convolution).
Double-talk robustness comes from two mechanisms: a leakage-driven learning
rate, and a foreground/background filter pair where only a verified-better
background is promoted. Adaptation speed on sparse echo paths is helped by
proportionate (per-block) step scaling, and the gradient constraint is
applied to a rotating block plus the highest-energy block each frame.
"""

from __future__ import annotations

import numpy as np

PNLMS_RHO = 0.01
MU_MAX = 0.5
MIN_LEAK = 0.03           # regression floor; keeps converging when the
                          # residual decorrelates from the echo estimate
FAR_GATE = 1e-12          # mean-square far-end level below which nothing adapts
PROMOTE_RATIO = 0.9       # smoothed background must beat foreground by this
SMOOTH_ALPHA = 0.9        # two-path residual energy smoothing
POWER_SS_NUM = 0.35       # far-end power spectrum smoothing = this / K


class StreamError(ValueError):
    """Non-finite samples handed to the canceller."""


class AdaptationControl:
    """Leakage-regression learning-rate control.

    The leakage estimate is a clamped regression of residual power
    fluctuations onto echo-estimate power fluctuations (both are driven by
    the same far-end history, so their frame-level fluctuations co-move and
    the regression slope tracks the relative misalignment). The learning
    rate is the leakage scaled by the echo-to-residual power ratio: near
    MU_MAX right after an echo path change, near zero once the residual is
    dominated by uncorrelated near-end signal, exactly zero without far-end
    excitation. Before the first lock (no usable echo estimate yet) a
    bounded far-end-driven warmup rate is used instead.
    """

    def __init__(self, num_bins, mu_max=MU_MAX):
        self.mu_max = mu_max
        self.sm_echo = np.zeros(num_bins)
        self.sm_res = np.zeros(num_bins)
        self.pef = 0.0
        self.pff = 0.0
        self.leak = 0.0
        self.mu = 0.0
        self.adapted = False
        self._warmup = 0.0
        self._alpha = 0.05
        self._beta = 0.05

    def update(self, far_power, echo_power, res_power) -> float:
        """Per-frame power spectra of far end, echo estimate and residual."""
        far_level = float(np.mean(far_power))
        if far_level < FAR_GATE:
            self.mu = 0.0
            return self.mu
        d_echo = echo_power - self.sm_echo
        d_res = res_power - self.sm_res
        self.sm_echo += self._alpha * d_echo
        self.sm_res += self._alpha * d_res
        self.pef = (1 - self._beta) * self.pef + self._beta * float(d_res @ d_echo)
        self.pff = (1 - self._beta) * self.pff + self._beta * float(d_echo @ d_echo)
        self.leak = min(1.0, max(MIN_LEAK, self.pef / max(self.pff, 1e-30)))
        res_level = float(np.mean(res_power))
        echo_level = float(np.mean(echo_power))
        if not self.adapted:
            self.mu = min(0.5 * self.mu_max,
                          0.5 * self.mu_max * far_level / max(res_level, 1e-30))
            self._warmup += self.mu
            # hand over only once the filter produces a real echo estimate,
            # otherwise the 0/0 regression freezes adaptation before it starts
            if self._warmup > 8.0 and self.leak > 0.03 \
                    and echo_level > 0.01 * res_level:
                self.adapted = True
            return self.mu
        self.mu = min(self.mu_max,
                      self.leak * echo_level / max(res_level, 1e-30))
        return self.mu


class MdfFilter:
    """One foreground/background pair of K-block frequency-domain filters."""

    def __init__(self, rate: int, filter_ms: float = 150.0, hop: int | None = None,
                 proportionate: bool = True, two_path: bool = True,
                 mu_max: float = MU_MAX, fixed_mu: float | None = None):
        self.hop = hop if hop is not None else rate // 100
        self.size = 2 * self.hop
        self.bins = self.hop + 1
        self.K = max(1, int(round(filter_ms * rate / 1000.0 / self.hop)))
        self.proportionate = proportionate
        self.two_path = two_path
        self.fixed_mu = fixed_mu
        self.rate = rate

        self.W_bg = np.zeros((self.K, self.bins), dtype=complex)
        self.W_fg = np.zeros((self.K, self.bins), dtype=complex)
        self.X_hist = np.zeros((self.K, self.bins), dtype=complex)
        self._x_buf = np.zeros(self.size)
        self._pad = np.zeros((2, self.size))  # scratch for zero-padded rffts
        self.power = np.zeros(self.bins)
        self.rotation = 0
        self.sm_res_fg = 0.0
        self.sm_res_bg = 0.0
        self.control = AdaptationControl(self.bins, mu_max)
        self._ss = POWER_SS_NUM / self.K

    # -- pieces ----------------------------------------------------------

    def pnlms_block_scale(self) -> np.ndarray:
        """Per-block step multipliers, sum K; uniform when the filter is zero."""
        w = self.W_bg
        mags = np.sqrt(np.sum(w.real ** 2 + w.imag ** 2, axis=1))
        top = mags.max()
        if top <= 0.0:
            return np.ones(self.K)
        raw = np.maximum(PNLMS_RHO * top, mags)
        return raw * (self.K / raw.sum())

    def constrain_blocks(self, blocks) -> None:
        """Project chosen blocks onto causal taps (zero the second half)."""
        ks = sorted(set(int(b) for b in blocks))
        w = np.fft.irfft(self.W_bg[ks], n=self.size, axis=-1)
        w[:, self.hop:] = 0.0
        self.W_bg[ks] = np.fft.rfft(w, axis=-1)

    def two_path_update(self, mic_energy, res_fg, res_bg) -> str:
        """Promote background when it wins now and on the smoothed window;
        reset a diverged background (residual above the mic energy).

        Returns "promote", "reset" or "keep".
        """
        self.sm_res_fg = SMOOTH_ALPHA * self.sm_res_fg + (1 - SMOOTH_ALPHA) * res_fg
        self.sm_res_bg = SMOOTH_ALPHA * self.sm_res_bg + (1 - SMOOTH_ALPHA) * res_bg
        if res_bg > mic_energy:
            self.W_bg[:] = self.W_fg
            self.sm_res_bg = self.sm_res_fg
            return "reset"
        if res_bg < res_fg and self.sm_res_bg < PROMOTE_RATIO * self.sm_res_fg:
            self.W_fg[:] = self.W_bg
            return "promote"
        return "keep"

    def _filter_output(self, weights) -> np.ndarray:
        spec = np.einsum("kb,kb->b", self.X_hist, weights)
        return np.fft.irfft(spec, n=self.size)[self.hop:]

    def impulse_response(self) -> np.ndarray:
        """Foreground taps as one K*hop time-domain vector (debug/test export)."""
        taps = np.fft.irfft(self.W_fg, n=self.size, axis=1)[:, : self.hop]
        return taps.reshape(-1)

    # -- per-frame processing ---------------------------------------------

    def process(self, mic: np.ndarray, far: np.ndarray):
        """Cancel echo in one hop; returns (residual y, echo estimate).

        Rejects non-finite input without touching state.
        """
        if mic.shape[0] != self.hop or far.shape[0] != self.hop:
            raise StreamError(f"expected hops of {self.hop} samples")
        if not (np.isfinite(mic).all() and np.isfinite(far).all()):
            raise StreamError("non-finite samples in AEC input")

        self._x_buf[: self.hop] = self._x_buf[self.hop:]
        self._x_buf[self.hop:] = far
        self.X_hist[1:] = self.X_hist[:-1]
        self.X_hist[0] = np.fft.rfft(self._x_buf)

        if not self.two_path:
            y_fg = self._filter_output(self.W_fg)
            e_fg = mic - y_fg
            e_bg, y_bg = e_fg, y_fg
        else:
            spec = np.stack((
                np.einsum("kb,kb->b", self.X_hist, self.W_fg),
                np.einsum("kb,kb->b", self.X_hist, self.W_bg)))
            both = np.fft.irfft(spec, n=self.size, axis=-1)[:, self.hop:]
            y_fg, y_bg = both[0], both[1]
            e_fg = mic - y_fg
            e_bg = mic - y_bg

        mic_energy = float(mic @ mic)
        res_fg = float(e_fg @ e_fg)
        res_bg = float(e_bg @ e_bg)
        far_energy = float(far @ far)
        far_active = far_energy / self.hop >= FAR_GATE
        verdict = "keep"
        if self.two_path and far_active:
            verdict = self.two_path_update(mic_energy, res_fg, res_bg)
        out, est = (e_bg, y_bg) if verdict == "promote" else (e_fg, y_fg)
        e_adapt = e_fg if verdict == "reset" else e_bg

        if far_active:
            x0 = self.X_hist[0]
            far_pow = x0.real ** 2 + x0.imag ** 2
            self.power += self._ss * (far_pow - self.power)
            if self.fixed_mu is not None:
                self._pad[0, self.hop:] = e_adapt
                E = np.fft.rfft(self._pad[0])
                mu = self.fixed_mu
                self.control.mu = mu
            else:
                self._pad[0, self.hop:] = e_adapt
                self._pad[1, self.hop:] = y_fg if verdict == "reset" else y_bg
                spec2 = np.fft.rfft(self._pad, axis=-1)
                E, Yf = spec2[0], spec2[1]
                mu = self.control.update(far_pow,
                                         Yf.real ** 2 + Yf.imag ** 2,
                                         E.real ** 2 + E.imag ** 2)
            if mu > 0.0:
                prop = self.pnlms_block_scale() if self.proportionate \
                    else np.ones(self.K)
                # per-block steps above ~1 recycle error between blocks and
                # floor the attainable misalignment, so cap the applied step
                prop = np.minimum(prop, 1.0 / mu)
                hist_pow = self.X_hist.real ** 2 + self.X_hist.imag ** 2
                # proportionate NLMS normalization: the per-bin contraction is
                # exactly mu regardless of how the steps concentrate on blocks
                denom = prop @ hist_pow + 1e-6 * self.power.mean() + 1e-10
                grad = np.conj(self.X_hist) * (E / denom)
                self.W_bg += (mu * prop)[:, None] * grad
                w = self.W_bg
                energies = np.sum(w.real ** 2 + w.imag ** 2, axis=1)
                self.constrain_blocks((self.rotation, int(np.argmax(energies))))
                self.rotation = (self.rotation + 1) % self.K
        if not self.two_path:
            self.W_fg[:] = self.W_bg
        return out, est
