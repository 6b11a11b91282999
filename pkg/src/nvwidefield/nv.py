"""NV resonance model and the frequency-modulated ODMR pixel response.

Frequencies are in MHz and fields in tesla. Sensing uses the lower branch
f- = D - (df/dB)|B.axis| of one axis, so a positive increase of the
projected field moves the line down in frequency.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

_S3 = 1.0 / np.sqrt(3.0)
# <111> directions of a (100)-cut crystal, all with positive z
DEFAULT_AXES = (
    (_S3, _S3, _S3),
    (-_S3, _S3, _S3),
    (_S3, -_S3, _S3),
    (-_S3, -_S3, _S3),
)


@dataclass(frozen=True)
class NVModel:
    zero_field_splitting: float = 2870.0   # D, MHz
    gyro_hz_per_nt: float = 28.0            # df/dB
    axes: tuple = DEFAULT_AXES
    contrast: float = 0.014
    linewidth: float = 0.5                  # HWHM, MHz
    fm_deviation: float = 4.0               # MHz
    sensing: int = 0                        # index into axes

    def __post_init__(self):
        if not 0 < self.contrast < 1:
            raise ValueError(f"contrast must lie in (0, 1), got {self.contrast}")
        if not self.linewidth > 0:
            raise ValueError("linewidth must be positive")
        if not self.fm_deviation > 0:
            raise ValueError("fm_deviation must be positive")
        if not self.gyro_hz_per_nt > 0:
            raise ValueError("gyromagnetic factor must be positive")
        axes = tuple(tuple(float(c) for c in a) for a in self.axes)
        for a in axes:
            if len(a) != 3 or abs(np.linalg.norm(a) - 1.0) > 1e-9:
                raise ValueError(f"NV axis {a} is not a unit 3-vector")
        if not 0 <= self.sensing < len(axes):
            raise ValueError("sensing axis index out of range")
        object.__setattr__(self, "axes", axes)

    @property
    def mhz_per_tesla(self) -> float:
        return self.gyro_hz_per_nt * 1e9 * 1e-6

    @property
    def sensing_axis(self) -> np.ndarray:
        return np.array(self.axes[self.sensing])

    def with_sensing_axis(self, axis) -> "NVModel":
        """Copy whose sensing axis is ``axis`` (normalized).

        A default crystal axis is selected by index when it matches up to
        sign, otherwise the sensing slot is replaced.
        """
        v = np.asarray(axis, dtype=float)
        v = v / np.linalg.norm(v)
        for i, a in enumerate(self.axes):
            if abs(abs(np.dot(v, a)) - 1.0) < 1e-12:
                return _replace(self, sensing=i)
        axes = list(self.axes)
        axes[self.sensing] = tuple(v)
        return _replace(self, axes=tuple(axes))

    def sensing_center(self, bias) -> float:
        """Lower-branch frequency of the sensing axis under a static bias (T)."""
        proj = abs(float(np.dot(np.asarray(bias, float), self.sensing_axis)))
        return self.zero_field_splitting - self.mhz_per_tesla * proj


def _replace(model: NVModel, **kw) -> NVModel:
    from dataclasses import replace
    return replace(model, **kw)


class Resonances(NamedTuple):
    frequencies: np.ndarray   # MHz, ascending
    axis: np.ndarray          # axis index of each line
    branch: np.ndarray        # -1 for f-, +1 for f+


def resonance_frequencies(B, model: NVModel) -> Resonances:
    """All eight secular resonance lines (4 axes x f-/f+), sorted."""
    B = np.asarray(B, dtype=float)
    freqs, axis, branch = [], [], []
    for i, a in enumerate(model.axes):
        shift = model.mhz_per_tesla * abs(float(np.dot(B, a)))
        for sgn in (-1, 1):
            freqs.append(model.zero_field_splitting + sgn * shift)
            axis.append(i)
            branch.append(sgn)
    order = np.argsort(np.array(freqs), kind="stable")
    return Resonances(np.array(freqs)[order], np.array(axis)[order], np.array(branch)[order])


def lorentzian_pv(f_mw, f0, model: NVModel):
    """Normalized fluorescence 1 - C G^2 / ((f - f0)^2 + G^2)."""
    g2 = model.linewidth ** 2
    d = np.asarray(f_mw, dtype=float) - np.asarray(f0, dtype=float)
    return 1.0 - model.contrast * g2 / (d * d + g2)


def _lorentzian_deriv(d, model: NVModel):
    g2 = model.linewidth ** 2
    den = d * d + g2
    return 2.0 * model.contrast * g2 * d / (den * den)


def demod_response(f_mw, f0, model: NVModel):
    """Square-wave FM lock-in response [L(f+dev) - L(f-dev)] / 2."""
    # evaluated through the detuning so that antisymmetry about f0 is exact
    d = np.asarray(f_mw, dtype=float) - np.asarray(f0, dtype=float)
    return _demod_of_detuning(d, model)


def _demod_of_detuning(d, model: NVModel):
    g2 = model.linewidth ** 2
    dev = model.fm_deviation
    a = d + dev
    b = d - dev
    # L(a) - L(b) = C g2 (a^2 - b^2) / ((a^2+g2)(b^2+g2)), odd in d by construction
    return 0.5 * model.contrast * g2 * (a * a - b * b) / ((a * a + g2) * (b * b + g2))


def slope_dpvdf(f_mw, f0, model: NVModel):
    """Analytic d(demod_response)/d(f_mw), per MHz."""
    d = np.asarray(f_mw, dtype=float) - np.asarray(f0, dtype=float)
    dev = model.fm_deviation
    return 0.5 * (_lorentzian_deriv(d + dev, model) - _lorentzian_deriv(d - dev, model))


def field_from_pv(delta_pv, slope, model: NVModel, slope_floor: float = 0.0):
    """Convert a pixel-value change into projected field (T).

    ``slope`` is d(pv)/d(f_mw) per MHz in the same units as ``delta_pv``.
    Pixels with |slope| <= slope_floor come back as NaN (dead).
    """
    dpv = np.asarray(delta_pv, dtype=float)
    s = np.asarray(slope, dtype=float)
    dead = ~(np.abs(s) > slope_floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        b = dpv / np.where(dead, np.nan, s) / model.mhz_per_tesla
    b = np.where(dead, np.nan, b)
    return float(b) if np.ndim(b) == 0 else b


def slope_floor(slopes, fraction: float = 0.1) -> float:
    """Dead-pixel threshold: a fraction of the median |slope|."""
    s = np.abs(np.asarray(slopes, dtype=float))
    s = s[np.isfinite(s)]
    return float(fraction * np.median(s)) if s.size else 0.0


def draw_f0_scatter(shape, half_width: float, rng: np.random.Generator) -> np.ndarray:
    """Per-pixel resonance offsets, uniform in [-half_width, +half_width] MHz."""
    return rng.uniform(-half_width, half_width, size=shape)
