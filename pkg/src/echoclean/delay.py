"""Far-end delay estimation and compensation.

A second, longer (400 ms) adaptive filter runs on 8 kHz versions of the
signals; the delay is the peak of its smoothed tap magnitudes. Switching is
deliberately conservative: a candidate must beat the current delay's tap by
6 dB for 50 consecutive frames (0.5 s), because every switch forces the main
canceller to re-converge.
"""

from __future__ import annotations

import numpy as np

from .aec import MdfFilter

ESTIMATOR_RATE = 8000
TAP_SMOOTH = 0.9
SWITCH_FRAMES = 50
SWITCH_MARGIN = 2.0      # 6 dB in amplitude
CAND_JITTER = 2          # taps at 8 kHz treated as "the same" candidate


class DelayLine:
    """Integer-sample delay of the far-end stream at the engine rate."""

    def __init__(self, rate: int, capacity_s: float = 0.6):
        self.hop = rate // 100
        self.capacity = int(capacity_s * rate)
        self._buf = np.zeros(self.capacity + 2 * self.hop)
        self.clamped = False

    def push_read(self, frame: np.ndarray, delay: int) -> np.ndarray:
        """Append one hop, return the hop delayed by `delay` samples."""
        if delay > self.capacity:
            delay = self.capacity
            self.clamped = True
        self._buf[:-self.hop] = self._buf[self.hop:]
        self._buf[-self.hop:] = frame
        end = self._buf.shape[0] - delay
        return self._buf[end - self.hop:end].copy()


class DelayEstimator:
    """Tracks the far-end-to-mic delay; feeds the main AEC an aligned far end."""

    def __init__(self, engine_rate: int, filter_ms: float = 400.0):
        self.engine_rate = engine_rate
        self.factor = engine_rate // ESTIMATOR_RATE
        # fixed full-rate step: a misplaced tap unlearns at mu/K, so a
        # controlled (shrinking) step would never re-lock after a delay jump;
        # the 6 dB / 50-frame switching hysteresis provides the robustness
        self.mdf = MdfFilter(ESTIMATOR_RATE, filter_ms=filter_ms,
                             proportionate=False, two_path=False, fixed_mu=0.7)
        ntaps = self.mdf.K * self.mdf.hop
        self._sm = np.zeros(ntaps)
        self.delay8 = 0
        self._pending = 0
        self._count = 0

    @property
    def delay_samples(self) -> int:
        """Current estimate in engine-rate samples."""
        return self.delay8 * self.factor

    @property
    def delay_ms(self) -> float:
        return self.delay8 * 1000.0 / ESTIMATOR_RATE

    def update(self, mic8: np.ndarray, far8: np.ndarray) -> int:
        """Adapt on one 8 kHz hop pair and return the current delay estimate."""
        if float(far8 @ far8) == 0.0 and not self._sm.any():
            return self.delay_samples
        self.mdf.process(mic8, far8)
        taps = self.mdf.impulse_response()
        self._sm += (1 - TAP_SMOOTH) * (np.abs(taps) - self._sm)
        cand = int(np.argmax(self._sm))
        if abs(cand - self.delay8) <= CAND_JITTER:
            self._count = 0
            return self.delay_samples
        beats = self._sm[cand] > SWITCH_MARGIN * self._sm[self.delay8]
        if beats and abs(cand - self._pending) <= CAND_JITTER:
            self._count += 1
        elif beats:
            self._pending = cand
            self._count = 1
        else:
            self._count = 0
        if self._count >= SWITCH_FRAMES:
            self.delay8 = self._pending
            self._count = 0
        return self.delay_samples
