import numpy as np
import pytest

from echoclean import simgen

RATE = 16000


def decay_fit_db_at(h, rate, t_target):
    """Linear fit of the tail's energy envelope (dB) vs time; returns the
    fitted drop at t_target relative to the tail start."""
    tail = h[1:]
    win = rate // 100
    nwin = len(tail) // win
    e = np.array([float(tail[i * win:(i + 1) * win] @ tail[i * win:(i + 1) * win])
                  for i in range(nwin)])
    t = (np.arange(nwin) + 0.5) * win / rate
    keep = e > 0
    db = 10 * np.log10(e[keep])
    t = t[keep]
    slope, intercept = np.polyfit(t, db, 1)
    return slope * t_target


class TestRir:
    def test_decay_matches_rt60(self):
        rng = np.random.default_rng(0)
        h = simgen.synth_rir(rng, rt60=0.2, length_s=0.3, rate=RATE)
        drop = decay_fit_db_at(h, RATE, 0.2)
        assert abs(drop + 60.0) < 1.0

    def test_unit_energy_and_direct_spike(self):
        rng = np.random.default_rng(1)
        h = simgen.synth_rir(rng, 0.3, 0.4, RATE)
        assert float(h @ h) == pytest.approx(1.0, rel=1e-9)
        assert np.argmax(np.abs(h)) == 0

    def test_early_gain_one_is_identity(self):
        rng = np.random.default_rng(2)
        h = simgen.synth_rir(rng, 0.25, 0.3, RATE)
        assert np.array_equal(simgen.scale_early(h, 1.0, RATE), h)

    def test_same_seed_bit_identical(self):
        a = simgen.synth_rir(np.random.default_rng(7), 0.2, 0.3, RATE)
        b = simgen.synth_rir(np.random.default_rng(7), 0.2, 0.3, RATE)
        assert np.array_equal(a, b)

    def test_target_tail_decays_at_200ms(self):
        rng = np.random.default_rng(3)
        h = simgen.synth_rir(rng, 0.8, 1.0, RATE)
        shaped = simgen.shape_tail(h, RATE, source_rt60=0.8)
        drop = decay_fit_db_at(shaped[int(0.02 * RATE):], RATE, 0.2)
        assert abs(drop + 60.0) < 6.0  # tail forced toward RT60 = 200 ms
        # early 20 ms untouched
        assert np.array_equal(shaped[: int(0.02 * RATE)], h[: int(0.02 * RATE)])

    def test_fast_room_not_amplified(self):
        rng = np.random.default_rng(4)
        h = simgen.synth_rir(rng, 0.1, 0.2, RATE)
        shaped = simgen.shape_tail(h, RATE, source_rt60=0.1)
        assert np.all(np.abs(shaped) <= np.abs(h) + 1e-15)


class TestRender:
    def test_component_additivity_bit_exact(self):
        sc = simgen.Scenario(seed=9, duration_s=1.0)
        r = simgen.render_scenario(sc)
        total = r.components["near"] + r.components["echo"] + r.components["noise"]
        assert np.array_equal(r.mic, total)

    def test_seed_determinism(self):
        sc = simgen.Scenario(seed=4, duration_s=1.0)
        a, b = simgen.render_scenario(sc), simgen.render_scenario(sc)
        assert np.array_equal(a.mic, b.mic)
        assert np.array_equal(a.far, b.far)
        assert np.array_equal(a.target, b.target)

    def test_requested_ratios_realized(self):
        sc = simgen.Scenario(seed=6, duration_s=2.0, snr_db=7.0,
                             echo_ratio_db=-3.0)
        r = simgen.render_scenario(sc)
        near = r.components["near"]
        snr = 10 * np.log10((near @ near) / (r.components["noise"] @ r.components["noise"]))
        eer = 10 * np.log10((near @ near) / (r.components["echo"] @ r.components["echo"]))
        assert abs(snr - 7.0) < 0.1
        assert abs(eer - (-3.0)) < 0.1

    def test_component_toggles(self):
        sc = simgen.Scenario(seed=2, duration_s=1.0, snr_db=None,
                             echo_ratio_db=None)
        r = simgen.render_scenario(sc)
        assert np.all(r.components["noise"] == 0)
        assert np.all(r.components["echo"] == 0)
        assert np.array_equal(r.mic, r.components["near"])

    def test_clip_produces_harmonic_distortion(self):
        base = simgen.Scenario(seed=8, duration_s=1.0, near="silence",
                               far="tone", tone_hz=440.0, snr_db=None,
                               echo_ratio_db=0.0, delay_ms=0.0, rt60=0.05)
        clipped = simgen.render_scenario(
            simgen.Scenario(**{**base.__dict__, "clip": True, "clip_level": 0.4}))
        ref = simgen.render_scenario(base)

        def thd(x):
            spec = np.abs(np.fft.rfft(x * np.hanning(len(x)))) ** 2
            f0 = int(round(440.0 * len(x) / RATE))
            fund = spec[f0 - 3: f0 + 4].sum()
            harm = sum(spec[k * f0 - 3: k * f0 + 4].sum() for k in range(2, 6))
            return np.sqrt(harm / fund)

        assert thd(clipped.components["echo"]) > 0.01
        crest = lambda x: np.max(np.abs(x)) / np.sqrt(np.mean(x ** 2))
        shifted_ref = ref.components["echo"]
        assert crest(clipped.components["echo"]) < crest(shifted_ref) + 0.5

    def test_injected_delay_position(self):
        sc = simgen.Scenario(seed=3, duration_s=1.0, near="silence",
                             far="noise", delay_ms=100.0, snr_db=None,
                             echo_ratio_db=0.0, rt60=0.05)
        r = simgen.render_scenario(sc)
        lag = np.argmax(np.correlate(r.mic, r.far[: RATE // 2], mode="valid"))
        assert abs(lag - 1600) <= 2


class TestScenarioFiles:
    def test_roundtrip(self):
        sc = simgen.Scenario(seed=42, duration_s=2.5, snr_db=None, clip=True)
        text = simgen.format_scenario(sc)
        back = simgen.parse_scenarios(text)
        assert back == [sc]

    def test_multiple_stanzas_and_comments(self):
        text = "# suite\nseed = 1\nduration_s = 1.0\n\nseed = 2\nnear = noise\n"
        scs = simgen.parse_scenarios(text)
        assert [s.seed for s in scs] == [1, 2]
        assert scs[1].near == "noise"

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown scenario key"):
            simgen.parse_scenarios("seed = 1\nbogus = 2\n")


class TestExport:
    def test_record_count_and_determinism(self, tmp_path):
        scs = [simgen.Scenario(seed=1, duration_s=1.0)]
        p1 = simgen.export_dataset(scs, tmp_path / "a")[0]
        p2 = simgen.export_dataset(scs, tmp_path / "b")[0]
        assert open(p1, "rb").read() == open(p2, "rb").read()
        rate, rec = simgen.read_records(p1)
        assert rate == RATE
        assert rec["features"].shape == (98, 100)  # 100 hops minus look-ahead
        for key in simgen.RECORD_KEYS[1:]:
            assert rec[key].shape == (98, 32)

    def test_ideal_gain_spot_check(self, tmp_path):
        # exported clean/noisy bands reproduce the ideal-ratio gains directly
        scs = [simgen.Scenario(seed=2, duration_s=1.0, far="silence",
                               echo_ratio_db=None, snr_db=12.0)]
        p = simgen.export_dataset(scs, tmp_path / "d")[0]
        _, rec = simgen.read_records(p)
        g = np.sqrt(rec["clean_bands"] / np.maximum(rec["noisy_bands"], 1e-30))
        assert np.all(np.isfinite(g))
        active = rec["noisy_bands"] > 1e-12
        assert 0.05 < float(np.median(g[active])) < 1.5
