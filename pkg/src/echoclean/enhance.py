"""Spectral enhancement: comb mixing, band gains, envelope postfilter.

Comb mixing replaces part of each band with its comb-filtered (more
periodic) version but is renormalized so every band keeps the energy it had
before mixing. That keeps gain semantics independent of the comb strength:
whatever the strengths do, the gain stage always scales the original band
energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POSTFILTER_BETA = 0.4
_RENORM_ITERS = 12
_RENORM_TOL = 1e-7


@dataclass
class EnhancementParams:
    postfilter_beta: float = POSTFILTER_BETA
    gain_floor: float = 0.0
    use_comb: bool = True
    use_postfilter: bool = True


def mix_comb(y_spec, c_spec, strengths, layout):
    """Blend the comb-filtered spectrum in, band energies preserved.

    Per-bin mixing with interpolated strengths changes band energies (the
    comb removes inter-harmonic energy), so per-band correction gains are
    solved iteratively until each band's energy matches the unmixed one to
    ~1e-7, which also absorbs the leakage of interpolating the correction.
    """
    if np.max(strengths) < 1e-4:
        return y_spec.copy()
    r_bin = layout.interpolate(strengths)
    mixed = (1.0 - r_bin) * y_spec + r_bin * c_spec
    target = layout.band_energies(y_spec)
    active = target > 1e-30
    if not active.all():
        # bands with no input energy pass the input through unchanged
        keep = layout.interpolate(active.astype(float))
        mixed = keep * mixed + (1.0 - keep) * y_spec
    return _renormalize(mixed, target, active, layout)


def _renormalize(mixed, target, active, layout):
    """Per-band energy correction, exact up to non-negativity clipping.

    The correction is applied in the power domain: bin powers are scaled by
    q = 1 + interp(lambda), which makes every band-energy constraint linear
    in lambda ((W diag(p) W^T) lambda = deficit), so one tridiagonal-size
    solve closes all bands at once. Where q would dip negative it is
    clipped and the remaining deficit re-solved; real comb pairs never clip.
    """
    W = layout.weights
    p = (mixed.real ** 2 + mixed.imag ** 2).copy()
    idx = np.nonzero(active)[0]
    Wa = W[idx]
    q_total = np.ones(W.shape[1])
    tgt = target[idx]
    for _ in range(4):
        e = Wa @ p
        resid = tgt - e
        if np.max(np.abs(resid) / np.maximum(tgt, 1e-30),
                  initial=0.0) < _RENORM_TOL:
            break
        gram = (Wa * p) @ Wa.T
        try:
            lam = np.linalg.solve(gram + 1e-30 * np.eye(len(idx)), resid)
        except np.linalg.LinAlgError:
            break
        q = np.maximum(1.0 + lam @ Wa, 0.0)
        q_total *= q
        p *= q
    return mixed * np.sqrt(q_total)


def apply_gains(spec, gains, layout, floor=0.0):
    """Scale bins by the interpolated per-band gain curve."""
    g = np.maximum(gains, floor) if floor > 0.0 else gains
    return spec * layout.interpolate(g)


def envelope_postfilter(gains, band_energies, beta=POSTFILTER_BETA):
    """Sharpen the gain envelope: g * sin(pi*g/2)^beta, then rescale so the
    total gained energy is unchanged, clamped back into [0, 1].

    Fixed points at 0 and 1; mid gains are attenuated before the rescale, so
    the rescale redistributes energy toward the strong bands.
    """
    shaped = gains * np.sin(0.5 * np.pi * gains) ** beta
    before = float(np.sum(gains ** 2 * band_energies))
    after = float(np.sum(shaped ** 2 * band_energies))
    if after > 1e-30:
        shaped = shaped * np.sqrt(before / after)
    return np.clip(shaped, 0.0, 1.0)
