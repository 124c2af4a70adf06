import numpy as np
import pytest

from echoclean import model


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    """Reference weight files (random codes, real structure) for the three
    size variants."""
    d = tmp_path_factory.mktemp("models")
    for variant in ("full", "sparse", "small"):
        model.build_reference_model(d / f"{variant}.pnw", variant, seed=0)
    return d


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def make_echo_scene(seed, seconds=5.0, rate=16000, tail_s=0.1, noise_db=-35.0,
                    scale=0.5):
    """White-noise far end through a random decaying echo path, plus a small
    mic noise floor; returns (far, mic, path)."""
    rng = np.random.default_rng(seed)
    n = int(seconds * rate)
    far = rng.standard_normal(n) * 0.1
    taps = int(tail_s * rate)
    h = rng.standard_normal(taps) * np.exp(-np.arange(taps) / (taps / 4.0))
    h[0] = 1.0
    h /= np.sqrt(h @ h)
    h *= scale
    echo = np.convolve(far, h)[:n]
    mic = echo.copy()
    if noise_db is not None:
        nz = rng.standard_normal(n)
        nz *= np.sqrt((echo @ echo) / (nz @ nz) * 10.0 ** (noise_db / 10.0))
        mic = echo + nz
    return far, mic, h


def erle_db(mic, out, rate, second):
    sl = slice(second * rate, (second + 1) * rate)
    return 10.0 * np.log10((mic[sl] @ mic[sl]) / (out[sl] @ out[sl] + 1e-300))
