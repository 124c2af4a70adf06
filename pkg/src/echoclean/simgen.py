"""Synthetic scenario generation: echo, noise, reverb, double-talk.

Everything is a pure function of the scenario seed. Component signals
(reverberant near end, scaled noise, scaled echo) are rendered separately
and summed left to right, so the mixture is bit-exactly the sum of the
exposed components. Requested SNR and echo-to-near ratios are realized
exactly by energy scaling.
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve, lfilter

EARLY_MS = 20.0
TARGET_TAIL_RT60 = 0.2


# -- sources ---------------------------------------------------------------

def synth_speech(rng: np.random.Generator, n: int, rate: int) -> np.ndarray:
    """Speech surrogate: voiced pulse trains through wandering resonators,
    unvoiced noise bursts, pauses, syllabic envelope."""
    out = np.zeros(n)
    pos = 0
    while pos < n:
        seg_len = int(rng.uniform(0.08, 0.25) * rate)
        seg_len = min(seg_len, n - pos)
        kind = rng.random()
        if kind < 0.15:
            pos += seg_len  # pause
            continue
        if kind < 0.70:
            f0 = rng.uniform(85.0, 230.0)
            period = rate / f0
            exc = np.zeros(seg_len)
            t = period * (1.0 + 0.01 * rng.standard_normal())
            i = rng.uniform(0, period)
            while i < seg_len:
                exc[int(i)] = 1.0
                i += t
        else:
            exc = rng.standard_normal(seg_len) * 0.08
        seg = exc
        for _ in range(2):
            fc = rng.uniform(300.0, 3200.0)
            r = rng.uniform(0.88, 0.97)
            th = 2 * np.pi * fc / rate
            seg = lfilter([1.0], [1.0, -2 * r * np.cos(th), r * r], seg)
        env = np.sin(np.pi * (np.arange(seg_len) + 0.5) / seg_len) ** 0.5
        out[pos: pos + seg_len] = seg * env
        pos += seg_len
    rms = np.sqrt(np.mean(out ** 2))
    return out / rms * 0.1 if rms > 0 else out


def synth_noise(rng: np.random.Generator, n: int, rate: int,
                kind: str = "white") -> np.ndarray:
    w = rng.standard_normal(n)
    if kind == "pink":
        spec = np.fft.rfft(w)
        f = np.arange(spec.shape[0])
        f[0] = 1
        spec = spec / np.sqrt(f)
        w = np.fft.irfft(spec, n=n)
    return w / np.sqrt(np.mean(w ** 2)) * 0.1


def _make_source(kind, rng, n, rate, tone_hz=440.0):
    if kind == "silence":
        return np.zeros(n)
    if kind == "speech":
        return synth_speech(rng, n, rate)
    if kind == "tone":
        return 0.1 * np.sqrt(2.0) * np.sin(2 * np.pi * tone_hz / rate * np.arange(n))
    if kind in ("white", "pink", "noise"):
        return synth_noise(rng, n, rate, "pink" if kind == "pink" else "white")
    raise ValueError(f"unknown source kind {kind!r}")


# -- room impulse responses --------------------------------------------------

def synth_rir(rng: np.random.Generator, rt60: float, length_s: float,
              rate: int) -> np.ndarray:
    """Direct-path spike plus exponentially decaying white-noise tail,
    normalized to unit energy. The tail reaches -60 dB (energy) at rt60."""
    n = max(int(length_s * rate), 8)
    t = np.arange(n) / rate
    tail = rng.standard_normal(n) * 10.0 ** (-3.0 * t / rt60)
    tail[0] = 0.0
    h = tail.copy()
    h[0] = np.sqrt(float(tail @ tail))  # direct path at 0 dB direct-to-reverb
    return h / np.sqrt(float(h @ h))


def scale_early(h: np.ndarray, gain: float, rate: int) -> np.ndarray:
    out = h.copy()
    out[: int(EARLY_MS / 1000.0 * rate)] *= gain
    return out


def shape_tail(h: np.ndarray, rate: int, target_rt60: float = TARGET_TAIL_RT60,
               source_rt60: float | None = None) -> np.ndarray:
    """Training-target response: keep the first 20 ms, force the tail to
    decay at least as fast as target_rt60 (never amplify a faster room)."""
    knee = int(EARLY_MS / 1000.0 * rate)
    out = h.copy()
    t = np.arange(len(h) - knee) / rate
    extra = -3.0 * t / target_rt60
    if source_rt60 is not None:
        extra = extra + 3.0 * t / source_rt60
    out[knee:] *= 10.0 ** np.minimum(extra, 0.0)
    return out


# -- scenario -----------------------------------------------------------------

@dataclass
class Scenario:
    seed: int = 0
    duration_s: float = 5.0
    rate: int = 16000
    near: str = "speech"
    far: str = "speech"
    noise: str = "white"
    rt60: float = 0.3
    snr_db: float | None = 20.0
    echo_ratio_db: float | None = 0.0
    delay_ms: float = 40.0
    early_gain: float = 1.0
    early_gain_far: float = 1.0
    clip: bool = False
    clip_level: float = 0.5
    lowpass_hz: float | None = None
    tone_hz: float = 440.0


@dataclass
class Rendered:
    mic: np.ndarray
    far: np.ndarray
    target: np.ndarray
    components: dict
    scenario: Scenario
    delay_samples: int


def render_scenario(sc: Scenario) -> Rendered:
    rate = sc.rate
    n = int(sc.duration_s * rate)
    seeds = np.random.SeedSequence(sc.seed).spawn(4)
    rng_near, rng_far, rng_noise, rng_rir = (np.random.default_rng(s) for s in seeds)

    near_dry = _make_source(sc.near, rng_near, n, rate, sc.tone_hz)
    far = _make_source(sc.far, rng_far, n, rate, sc.tone_hz)
    rir_len = max(0.25, 1.3 * sc.rt60)
    base = synth_rir(rng_rir, sc.rt60, rir_len, rate)
    h_near = scale_early(base, sc.early_gain, rate)
    h_far = scale_early(base, sc.early_gain_far, rate)

    near_wet = fftconvolve(near_dry, h_near)[:n]
    target = fftconvolve(near_dry, shape_tail(h_near, rate, source_rt60=sc.rt60))[:n]

    delay = int(round(sc.delay_ms / 1000.0 * rate))
    echo = np.zeros(n)
    has_echo = sc.echo_ratio_db is not None and sc.far != "silence"
    if has_echo:
        shifted = np.concatenate((np.zeros(delay), far))[:n]
        if sc.clip:
            lim = sc.clip_level * np.max(np.abs(shifted)) if shifted.any() else 1.0
            shifted = np.clip(shifted, -lim, lim)
        echo = fftconvolve(shifted, h_far)[:n]
        e_near = float(near_wet @ near_wet)
        e_echo = float(echo @ echo)
        if e_echo > 0:
            if e_near > 1e-12:
                k = np.sqrt(e_near / e_echo * 10.0 ** (-sc.echo_ratio_db / 10.0))
            else:
                k = 0.1 * np.sqrt(n / e_echo)  # far single-talk: echo at -20 dBFS rms
            echo = echo * k

    noise = np.zeros(n)
    if sc.snr_db is not None and sc.noise != "none":
        noise = _make_source(sc.noise, rng_noise, n, rate)
        ref = float(near_wet @ near_wet)
        if ref <= 1e-12:
            ref = float(echo @ echo)
        if ref <= 1e-12:
            ref = 0.01 * n
        e_noise = float(noise @ noise)
        if e_noise > 0:
            noise = noise * np.sqrt(ref / e_noise * 10.0 ** (-sc.snr_db / 10.0))

    if sc.lowpass_hz is not None:
        from scipy.signal import firwin
        taps = firwin(101, sc.lowpass_hz / (rate / 2.0))
        far = np.convolve(far, taps, mode="same")
        target = np.convolve(target, taps, mode="same")
        near_wet = np.convolve(near_wet, taps, mode="same")
        echo = np.convolve(echo, taps, mode="same")
        noise = np.convolve(noise, taps, mode="same")

    peak = max(np.max(np.abs(near_wet + echo + noise), initial=0.0),
               np.max(np.abs(far), initial=0.0),
               np.max(np.abs(target), initial=0.0))
    if peak > 0.99:
        s = 0.7 / peak
        far, target = far * s, target * s
        near_wet, echo, noise = near_wet * s, echo * s, noise * s

    # the mixture is formed last so it is bit-exactly the component sum
    mic = near_wet + echo + noise

    return Rendered(mic=mic, far=far, target=target,
                    components={"near": near_wet, "echo": echo, "noise": noise},
                    scenario=sc, delay_samples=delay)


# -- dataset export ------------------------------------------------------------

DATASET_MAGIC = b"PND1"
DATASET_VERSION = 1
RECORD_KEYS = ("features", "clean_bands", "noisy_bands", "comb_bands",
               "cross_bands", "clean_coherence")


def write_records(path, rate: int, rec: dict) -> None:
    """PND1 file: header then one flat little-endian f32 row per frame
    (features, then the five 32-value band blocks in RECORD_KEYS order)."""
    import struct

    frames = rec["features"].shape[0]
    feat_dim = rec["features"].shape[1]
    bands = rec["clean_bands"].shape[1]
    row = np.concatenate([rec[k] for k in RECORD_KEYS], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIII", DATASET_VERSION, rate, frames, feat_dim, bands))
        fh.write(row.tobytes())


def read_records(path) -> tuple[int, dict]:
    import struct

    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_MAGIC:
            raise ValueError(f"{path}: not a PND1 dataset file")
        version, rate, frames, feat_dim, bands = struct.unpack("<IIIII", fh.read(20))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        flat = np.frombuffer(fh.read(), dtype="<f4").reshape(
            frames, feat_dim + 5 * bands).astype(float)
    rec = {"features": flat[:, :feat_dim]}
    for i, key in enumerate(RECORD_KEYS[1:]):
        lo = feat_dim + i * bands
        rec[key] = flat[:, lo: lo + bands]
    return rate, rec


def export_dataset(scenarios, out_dir, include_aec=True) -> list:
    """Render each scenario and dump engine features plus target band data."""
    import os

    from .pipeline import collect_training_frames

    paths = []
    os.makedirs(out_dir, exist_ok=True)
    for sc in scenarios:
        rend = render_scenario(sc)
        rec = collect_training_frames(rend.mic, rend.far, rend.target,
                                      sc.rate, include_aec=include_aec)
        path = os.path.join(out_dir, f"scenario_{sc.seed:05d}.pnd")
        write_records(path, sc.rate, rec)
        paths.append(path)
    return paths


# -- scenario spec files -------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(Scenario)}


def format_scenario(sc: Scenario) -> str:
    lines = []
    for f in dataclasses.fields(Scenario):
        v = getattr(sc, f.name)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines)


def parse_scenarios(text: str) -> list[Scenario]:
    """Key-value stanzas separated by blank lines; '#' starts a comment."""
    out = []
    kv = {}
    for raw in io.StringIO(text).read().splitlines() + [""]:
        line = raw.split("#", 1)[0].strip()
        if not line:
            if kv:
                out.append(_scenario_from(kv))
                kv = {}
            continue
        key, _, val = line.partition("=")
        kv[key.strip()] = val.strip()
    return out


def _scenario_from(kv: dict) -> Scenario:
    args = {}
    for key, val in kv.items():
        if key not in _FIELDS:
            raise ValueError(f"unknown scenario key {key!r}")
        if val.lower() in ("none", ""):
            args[key] = None
            continue
        ftype = _FIELDS[key].type
        if "int" in str(ftype):
            args[key] = int(val)
        elif "float" in str(ftype):
            args[key] = float(val)
        elif "bool" in str(ftype):
            args[key] = val.lower() in ("1", "true", "yes", "on")
        else:
            args[key] = val
    return Scenario(**args)
