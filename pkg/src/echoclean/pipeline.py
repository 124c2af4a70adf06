"""Stream orchestration: delay -> AEC -> features/pitch -> model -> enhance.

One Engine instance is one stream state machine. Per input hop it emits
exactly one output hop; the output is the enhanced input delayed by the
fixed 40 ms algorithmic budget (10 ms frame buffering + 10 ms overlap-add +
20 ms model look-ahead), which is made explicit in the emitted alignment so
measured file delay equals the algorithmic delay.
"""

from __future__ import annotations

import json
import time
import wave
from collections import deque
from dataclasses import dataclass, asdict

import numpy as np

from . import dsp, enhance, features, pitch
from .aec import MdfFilter
from .delay import DelayEstimator, DelayLine, ESTIMATOR_RATE
from .dsp import BandLayout, ConfigError, FirDecimator, StftAnalyzer, StftSynthesizer
from .enhance import EnhancementParams
from .model import IdentityModel, load_weights

LOOKAHEAD_FRAMES = 2  # M


@dataclass(frozen=True)
class EngineConfig:
    rate: int = 16000
    model: str | None = None        # path to .pnw, or None/"identity" for the stub
    aec_only: bool = False
    res_only: bool = False
    postfilter: bool = True
    gain_floor: float = 0.0
    dump_features: str | None = None


@dataclass
class StreamStats:
    erle_star_db: float = 0.0
    rtf: float = 0.0
    delay_ms: float = 0.0
    frames: int = 0
    nan_frames: int = 0


def erle_star(mic: np.ndarray, out: np.ndarray, delay: int = 0) -> float:
    """Input-to-output energy ratio in dB; `delay` aligns out to mic."""
    n = min(mic.shape[0] - delay, out.shape[0] - delay)
    if n <= 0:
        return 0.0
    e_in = float(mic[:n] @ mic[:n])
    o = out[delay: delay + n]
    e_out = float(o @ o)
    if e_out <= 0.0:
        return 80.0
    return min(80.0, 10.0 * np.log10(e_in / e_out))


class Engine:
    """Joint echo control and enhancement for one stream."""

    def __init__(self, config: EngineConfig, model=None, feature_tap=None):
        if config.aec_only and config.res_only:
            raise ConfigError("aec_only and res_only are mutually exclusive")
        self.config = config
        rate = config.rate
        self.hop = dsp.hop_size(rate)
        self.rate = rate

        if model is not None:
            self.model = model
        elif config.model in (None, "identity"):
            self.model = IdentityModel()
        else:
            self.model = load_weights(config.model)
        self.model_state = self.model.create_state()

        self.layout = BandLayout(rate)
        self.params = EnhancementParams(use_postfilter=config.postfilter,
                                        gain_floor=config.gain_floor)
        self.feature_tap = feature_tap
        self._needs_features = (feature_tap is not None
                                or config.dump_features is not None
                                or not isinstance(self.model, IdentityModel))

        if not config.res_only:
            factor = rate // ESTIMATOR_RATE
            self._dec_mic = FirDecimator(factor, rate)
            self._dec_far = FirDecimator(factor, rate)
            self.delay_estimator = DelayEstimator(rate)
            self.delay_line = DelayLine(rate)
            self.aec = MdfFilter(rate)
        else:
            self.delay_estimator = None

        self._stft_y = StftAnalyzer(rate)
        self._stft_far = StftAnalyzer(rate)
        self._stft_comb = StftAnalyzer(rate)
        self._synth = StftSynthesizer(rate)
        self.tracker = pitch.PitchTracker(rate)
        self._y_hist = pitch.HistoryBuffer(self.tracker.history_length(LOOKAHEAD_FRAMES))
        self._builder = features.FeatureBuilder(rate)
        self._spec_queue = deque(maxlen=LOOKAHEAD_FRAMES + 1)
        self._out_delay = np.zeros(self.hop)
        self._frame = -1
        self.nan_frames = 0
        self._dump = open(config.dump_features, "wb") if config.dump_features else None

    @property
    def latency_samples(self) -> int:
        """File-visible delay: frame + overlap + look-ahead."""
        if self.config.aec_only:
            return 0
        return (LOOKAHEAD_FRAMES + 2) * self.hop

    @property
    def delay_ms(self) -> float:
        return self.delay_estimator.delay_ms if self.delay_estimator else 0.0

    def close(self):
        if self._dump:
            self._dump.close()
            self._dump = None

    def process_frame(self, mic: np.ndarray, far: np.ndarray) -> np.ndarray:
        """Consume one mic/far hop pair, emit one enhanced hop."""
        if mic.shape[0] != self.hop or far.shape[0] != self.hop:
            raise ConfigError(f"expected hops of {self.hop} samples")
        self._frame += 1
        if not (np.isfinite(mic).all() and np.isfinite(far).all()):
            self.nan_frames += 1
            mic = np.zeros(self.hop)
            far = np.zeros(self.hop)

        if not self.config.res_only:
            mic8 = self._dec_mic.process(mic)
            far8 = self._dec_far.process(far)
            self.delay_estimator.update(mic8, far8)
            far_aligned = self.delay_line.push_read(
                far, self.delay_estimator.delay_samples)
            y, _ = self.aec.process(mic, far_aligned)
        else:
            y = mic

        if self.config.aec_only:
            return self._guard(y)

        y_spec = self._stft_y.process(y)
        f_spec = self._stft_far.process(far)  # RES uses the undelayed far end
        self._y_hist.push(y)
        self._spec_queue.append(y_spec)

        if len(self._spec_queue) <= LOOKAHEAD_FRAMES:
            out = np.zeros(self.hop)
        else:
            out = self._enhance_frame(y_spec, f_spec)
        emitted = self._out_delay
        self._out_delay = self._guard(out)
        return emitted

    def _enhance_frame(self, y_spec_look, f_spec_look):
        y_spec = self._spec_queue[0]
        hist = self._y_hist.data
        period, corr = self.tracker.update(hist)
        c_hop = pitch.comb_filter(hist, period, self.hop,
                                  LOOKAHEAD_FRAMES * self.hop)
        c_spec = self._stft_comb.process(c_hop)

        if self._needs_features:
            q = pitch.band_coherence(y_spec, c_spec, self.layout)
            feats = self._builder.build(self.layout.band_energies(y_spec_look),
                                        q,
                                        self.layout.band_energies(f_spec_look),
                                        period, corr,
                                        hist[-self.tracker.window:])
            if self._dump:
                self._dump.write(feats.astype("<f4").tobytes())
            if self.feature_tap is not None:
                self.feature_tap(dict(frame=self._frame - LOOKAHEAD_FRAMES,
                                      features=feats, y_spec=y_spec,
                                      c_spec=c_spec, period=period))
            gains, strengths = self.model.forward(self.model_state, feats)
        else:
            gains, strengths = self.model.forward(self.model_state, None)

        if not self.params.use_comb:
            strengths = np.zeros_like(strengths)
        mixed = enhance.mix_comb(y_spec, c_spec, strengths, self.layout)
        if self.params.use_postfilter:
            gains = enhance.envelope_postfilter(gains,
                                                self.layout.band_energies(y_spec),
                                                self.params.postfilter_beta)
        out_spec = enhance.apply_gains(mixed, gains, self.layout,
                                       self.params.gain_floor)
        return self._synth.process(out_spec)

    def _guard(self, hop: np.ndarray) -> np.ndarray:
        if not np.isfinite(hop).all():
            self.nan_frames += 1
            return np.zeros(self.hop)
        return hop


# -- WAV plumbing ---------------------------------------------------------

class AudioFormatError(ValueError):
    pass


def _check_wav(wf: wave.Wave_read, path, rate):
    if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
        raise AudioFormatError(
            f"{path}: expected mono 16-bit PCM, found "
            f"{wf.getnchannels()} ch / {8 * wf.getsampwidth()} bit")
    if wf.getframerate() != rate:
        raise AudioFormatError(
            f"{path}: expected {rate} Hz, found {wf.getframerate()} Hz")


def read_wav(path, rate=None):
    with wave.open(str(path), "rb") as wf:
        if rate is not None:
            _check_wav(wf, path, rate)
        data = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
        return data.astype(float) / 32768.0, wf.getframerate()


def write_wav(path, samples, rate):
    pcm = np.clip(np.rint(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(pcm.tobytes())


def process_files(mic_path, far_path, out_path, config: EngineConfig,
                  stats_path=None) -> StreamStats:
    """Stream two WAVs through the engine; bounded memory in the hop loop."""
    with wave.open(str(mic_path), "rb") as wm, wave.open(str(far_path), "rb") as wf:
        _check_wav(wm, mic_path, config.rate)
        _check_wav(wf, far_path, config.rate)
        n_mic, n_far = wm.getnframes(), wf.getnframes()
        total = max(n_mic, n_far)
        engine = Engine(config)
        hop = engine.hop
        lat = engine.latency_samples
        e_in_total = 0.0
        e_out_total = 0.0
        # per-hop input energies; only the last `lat` worth is ever dropped
        e_in_tail = deque(maxlen=lat // hop + 1)
        e_out_head = 0.0      # output energy inside the first `lat` samples
        written = 0
        elapsed = 0.0
        with wave.open(str(out_path), "wb") as wo:
            wo.setnchannels(1)
            wo.setsampwidth(2)
            wo.setframerate(config.rate)
            nframes = (total + hop - 1) // hop
            for _ in range(nframes):
                mic = np.frombuffer(wm.readframes(hop), dtype="<i2").astype(float) / 32768.0
                far = np.frombuffer(wf.readframes(hop), dtype="<i2").astype(float) / 32768.0
                mic = np.pad(mic, (0, hop - mic.shape[0]))
                far = np.pad(far, (0, hop - far.shape[0]))
                t0 = time.perf_counter()
                out = engine.process_frame(mic, far)
                elapsed += time.perf_counter() - t0
                e_in_tail.append(float(mic @ mic))
                e_in_total += e_in_tail[-1]
                if written < lat:
                    seg = out[: max(0, min(hop, lat - written))]
                    e_out_head += float(seg @ seg)
                e_out_total += float(out @ out)
                wo.writeframes(np.clip(np.rint(out * 32768.0), -32768, 32767)
                               .astype("<i2").tobytes())
                written += hop
        engine.close()
        drop = 0.0
        need = lat
        while need > 0 and e_in_tail:
            drop += e_in_tail.pop()
            need -= hop
        e_in = e_in_total - drop
        e_out = e_out_total - e_out_head
        if e_out <= 0.0:
            erle = 80.0 if e_in > 0 else 0.0
        else:
            erle = min(80.0, 10.0 * float(np.log10(max(e_in, 1e-30) / e_out)))
        stats = StreamStats(
            erle_star_db=round(erle, 4),
            rtf=elapsed / (total / config.rate) if total else 0.0,
            delay_ms=engine.delay_ms,
            frames=engine._frame + 1,
            nan_frames=engine.nan_frames,
        )
    if stats_path:
        with open(stats_path, "w") as fh:
            json.dump(asdict(stats), fh, indent=2)
    return stats


# -- training-data taps ------------------------------------------------------

def collect_training_frames(mic, far, target, rate, include_aec=True):
    """Per output frame: features plus the band data targets are built from.

    Returns dict of arrays keyed features, clean_bands, noisy_bands,
    comb_bands, cross_bands, clean_coherence; one row per frame.
    """
    rows = {k: [] for k in ("features", "clean_bands", "noisy_bands",
                            "comb_bands", "cross_bands", "clean_coherence")}
    layout = BandLayout(rate)
    hop = dsp.hop_size(rate)
    stft_x = StftAnalyzer(rate)
    stft_cx = StftAnalyzer(rate)
    tracker = pitch.PitchTracker(rate)
    x_hist = pitch.HistoryBuffer(tracker.history_length(LOOKAHEAD_FRAMES))
    x_queue = deque(maxlen=LOOKAHEAD_FRAMES + 1)

    def tap(rec):
        x_spec = x_queue[0]
        cx_hop = pitch.comb_filter(x_hist.data, rec["period"], hop,
                                   LOOKAHEAD_FRAMES * hop)
        cx_spec = stft_cx.process(cx_hop)
        rows["features"].append(rec["features"])
        rows["clean_bands"].append(layout.band_energies(x_spec))
        rows["noisy_bands"].append(layout.band_energies(rec["y_spec"]))
        rows["comb_bands"].append(layout.band_energies(rec["c_spec"]))
        rows["cross_bands"].append(layout.band_inner(rec["y_spec"], rec["c_spec"]))
        rows["clean_coherence"].append(
            pitch.band_coherence(x_spec, cx_spec, layout))

    config = EngineConfig(rate=rate, model=None, res_only=not include_aec)
    engine = Engine(config, feature_tap=tap)
    n = mic.shape[0] // hop * hop
    for i in range(0, n, hop):
        x_queue.append(stft_x.process(target[i: i + hop]))
        x_hist.push(target[i: i + hop])
        engine.process_frame(mic[i: i + hop], far[i: i + hop])
    return {k: np.asarray(v) for k, v in rows.items()}
