"""Per-frame input features for the gain/strength network.

100 values per frame: 32 log band energies of the canceller output at the
look-ahead frame, 32 pitch coherences at the current frame, 32 log band
energies of the (undelayed) far end at the look-ahead frame, then pitch
period, pitch correlation, a non-stationarity estimate, and the L1/L2 ratio
of the short-term prediction residual.
"""

from __future__ import annotations

import numba
import numpy as np

ENERGY_FLOOR = 1e-9
LPC_ORDER = 16
NUM_FEATURES = 100


def log_bands(energies: np.ndarray) -> np.ndarray:
    return np.log10(ENERGY_FLOOR + energies)


@numba.njit(cache=True)
def _levinson(r, order):
    """Autocorrelation-method LP coefficients [1, a1..a_order]."""
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    for i in range(1, order + 1):
        acc = r[i]
        for j in range(1, i):
            acc += a[j] * r[i - j]
        k = -acc / err
        a[1:i] = a[1:i] + k * a[i - 1:0:-1]
        a[i] = k
        err *= (1.0 - k * k)
        if err <= 0.0:
            break
    return a


def l1l2_ratio(e: np.ndarray) -> float:
    """||e||_1 / (sqrt(N) * ||e||_2), in (0, 1]; 0 for silence."""
    n = e.shape[0]
    l2 = float(np.sqrt(e @ e))
    if l2 < 1e-15:
        return 0.0
    return float(np.abs(e).sum() / (np.sqrt(n) * l2))


@numba.njit(cache=True)
def _lpc_residual_l1l2(window, order):
    n = window.shape[0]
    r = np.empty(order + 1)
    for k in range(order + 1):
        acc = 0.0
        for i in range(n - k):
            acc += window[i] * window[i + k]
        r[k] = acc
    if r[0] < 1e-12:
        return 0.0
    r[0] *= 1.0 + 1e-9
    a = _levinson(r, order)
    l1 = 0.0
    l2 = 0.0
    for i in range(n):
        acc = 0.0
        kmax = min(order + 1, i + 1)
        for k in range(kmax):
            acc += a[k] * window[i - k]
        l1 += abs(acc)
        l2 += acc * acc
    if l2 < 1e-30:
        return 0.0
    return l1 / (np.sqrt(float(n)) * np.sqrt(l2))


def excitation_l1l2(window: np.ndarray, order: int = LPC_ORDER) -> float:
    """L1/L2 ratio of the order-16 linear-prediction residual of `window`."""
    return float(_lpc_residual_l1l2(np.ascontiguousarray(window, dtype=float),
                                    order))


class FeatureBuilder:
    """Assembles the 100-feature vector; owns the band-energy history needed
    by the non-stationarity estimate."""

    def __init__(self, rate: int):
        self.tmin, self.tmax = rate // 500, int(rate / 62.5)
        self._prev_log = None

    def reset(self):
        self._prev_log = None

    def nonstationarity(self, log_e: np.ndarray) -> float:
        """Mean squared log-energy delta between consecutive frames, squashed
        to [0, 1); 0 on the first frame."""
        if self._prev_log is None:
            self._prev_log = log_e.copy()
            return 0.0
        v = float(np.mean((log_e - self._prev_log) ** 2))
        self._prev_log = log_e.copy()
        return v / (1.0 + v)

    def build(self, y_bands_look, q_now, f_bands_look, period, corr,
              y_window) -> np.ndarray:
        log_y = log_bands(y_bands_look)
        out = np.empty(NUM_FEATURES)
        out[0:32] = log_y
        out[32:64] = q_now
        out[64:96] = log_bands(f_bands_look)
        out[96] = (period - self.tmin) / (self.tmax - self.tmin)
        out[97] = corr
        out[98] = self.nonstationarity(log_y)
        out[99] = excitation_l1l2(y_window)
        return out
