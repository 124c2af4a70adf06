import dataclasses
import json

import numpy as np
import pytest

from echoclean import simgen
from echoclean.dsp import ConfigError
from echoclean.pipeline import (AudioFormatError, Engine, EngineConfig,
                                erle_star, process_files, read_wav, write_wav)

RATE, HOP = 16000, 160


def null_config(**kw):
    return EngineConfig(rate=RATE, model=None, res_only=True, postfilter=False, **kw)


class TestErleStar:
    def test_identity_zero_db(self, rng):
        d = rng.standard_normal(16000)
        assert erle_star(d, d) == pytest.approx(0.0, abs=1e-9)

    def test_tenth_amplitude_twenty_db(self, rng):
        d = rng.standard_normal(16000)
        assert erle_star(d, d / 10.0) == pytest.approx(20.0, abs=1e-9)

    def test_zero_output_capped(self, rng):
        d = rng.standard_normal(16000)
        assert erle_star(d, np.zeros_like(d)) == 80.0


class TestStreaming:
    def test_one_hop_out_per_hop_in(self, rng):
        eng = Engine(null_config())
        for _ in range(10):
            out = eng.process_frame(rng.standard_normal(HOP) * 0.1,
                                    np.zeros(HOP))
            assert out.shape == (HOP,)

    def test_wrong_hop_size_rejected(self):
        eng = Engine(null_config())
        with pytest.raises(ConfigError):
            eng.process_frame(np.zeros(80), np.zeros(80))

    def test_impulse_latency_40ms(self):
        eng = Engine(null_config())
        n = 40
        x = np.zeros(n * HOP)
        x[1000] = 0.5
        out = np.concatenate([eng.process_frame(x[i * HOP:(i + 1) * HOP],
                                                np.zeros(HOP))
                              for i in range(n)])
        assert int(np.argmax(np.abs(out))) - 1000 == 640  # 40 ms at 16 kHz
        assert eng.latency_samples == 640

    def test_first_hops_valid_zero_primed(self, rng):
        eng = Engine(null_config())
        for i in range(4):
            out = eng.process_frame(rng.standard_normal(HOP), np.zeros(HOP))
            assert np.all(np.isfinite(out))
            # inside the 40 ms pipeline delay: zero up to FFT round-off
            assert np.max(np.abs(out)) < 1e-12

    def test_nan_input_zeroed_and_counted(self):
        eng = Engine(null_config())
        bad = np.zeros(HOP)
        bad[0] = np.inf
        eng.process_frame(bad, np.zeros(HOP))
        assert eng.nan_frames == 1

    def test_config_immutable(self):
        cfg = null_config()
        with pytest.raises(dataclasses.FrozenInstanceError):
            cfg.aec_only = True

    def test_aec_only_no_lookahead_delay(self, rng):
        eng = Engine(EngineConfig(rate=RATE, aec_only=True))
        x = rng.standard_normal(HOP)
        out = eng.process_frame(x, np.zeros(HOP))
        assert np.allclose(out, x)
        assert eng.latency_samples == 0


class TestFiles:
    def test_null_pipeline_is_pure_delay(self, tmp_path, rng):
        x = np.clip(rng.standard_normal(RATE * 3) * 0.2, -0.95, 0.95)
        write_wav(tmp_path / "mic.wav", x, RATE)
        write_wav(tmp_path / "far.wav", np.zeros_like(x), RATE)
        process_files(tmp_path / "mic.wav", tmp_path / "far.wav",
                      tmp_path / "out.wav", null_config())
        mic, _ = read_wav(tmp_path / "mic.wav")
        out, _ = read_wav(tmp_path / "out.wav")
        assert np.max(np.abs(out[640:] - mic[:-640])) < 1e-5

    def test_digital_silence(self, tmp_path):
        z = np.zeros(RATE)
        write_wav(tmp_path / "mic.wav", z, RATE)
        write_wav(tmp_path / "far.wav", z, RATE)
        stats = process_files(tmp_path / "mic.wav", tmp_path / "far.wav",
                              tmp_path / "out.wav", EngineConfig(rate=RATE))
        out, _ = read_wav(tmp_path / "out.wav")
        assert np.all(out == 0)
        assert stats.rtf > 0

    def test_format_mismatch_reports_expected_and_found(self, tmp_path):
        write_wav(tmp_path / "mic.wav", np.zeros(1000), 8000)
        write_wav(tmp_path / "far.wav", np.zeros(1000), RATE)
        with pytest.raises(AudioFormatError, match="expected 16000.*found 8000"):
            process_files(tmp_path / "mic.wav", tmp_path / "far.wav",
                          tmp_path / "out.wav", EngineConfig(rate=RATE))

    def test_shorter_far_padded(self, tmp_path, rng):
        write_wav(tmp_path / "mic.wav", rng.standard_normal(RATE) * 0.1, RATE)
        write_wav(tmp_path / "far.wav", np.zeros(RATE // 2), RATE)
        stats = process_files(tmp_path / "mic.wav", tmp_path / "far.wav",
                              tmp_path / "out.wav", EngineConfig(rate=RATE))
        assert stats.frames == 100

    def test_stats_json_schema(self, tmp_path, rng):
        write_wav(tmp_path / "mic.wav", rng.standard_normal(RATE) * 0.1, RATE)
        write_wav(tmp_path / "far.wav", np.zeros(RATE), RATE)
        process_files(tmp_path / "mic.wav", tmp_path / "far.wav",
                      tmp_path / "out.wav", null_config(),
                      stats_path=tmp_path / "stats.json")
        stats = json.loads((tmp_path / "stats.json").read_text())
        assert set(stats) == {"erle_star_db", "rtf", "delay_ms", "frames",
                              "nan_frames"}

    def test_determinism_bit_identical(self, tmp_path, model_dir):
        sc = simgen.Scenario(seed=5, duration_s=2.0)
        rend = simgen.render_scenario(sc)
        write_wav(tmp_path / "mic.wav", rend.mic, RATE)
        write_wav(tmp_path / "far.wav", rend.far, RATE)
        cfg = EngineConfig(rate=RATE, model=str(model_dir / "small.pnw"))
        outs = []
        for k in range(2):
            process_files(tmp_path / "mic.wav", tmp_path / "far.wav",
                          tmp_path / f"out{k}.wav", cfg)
            outs.append((tmp_path / f"out{k}.wav").read_bytes())
        assert outs[0] == outs[1]

    def test_feature_dump_layout(self, tmp_path, rng):
        write_wav(tmp_path / "mic.wav", rng.standard_normal(RATE) * 0.1, RATE)
        write_wav(tmp_path / "far.wav", rng.standard_normal(RATE) * 0.1, RATE)
        cfg = EngineConfig(rate=RATE, res_only=True,
                           dump_features=str(tmp_path / "feat.bin"))
        process_files(tmp_path / "mic.wav", tmp_path / "far.wav",
                      tmp_path / "out.wav", cfg)
        raw = np.fromfile(tmp_path / "feat.bin", dtype="<f4")
        assert raw.size % 100 == 0
        assert raw.size // 100 == 98  # frames minus the 2-frame look-ahead
        assert np.all(np.isfinite(raw))
