"""Measurement pipeline: slope calibration, pv to field conversion, spectra,
pulse recovery, SNR masking and noise statistics.

Field timeseries are in microtesla; frequencies of the microwave drive are in
MHz, signal frequencies in Hz.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import optimize, stats

from .camera import FrameStack, LockInCamera, SeparableScene
from .nv import NVModel, slope_floor

T_TO_UT = 1e6


class CalibrationError(RuntimeError):
    pass


class MissingReferenceError(ValueError):
    """A required reference stack (offset or calibration) is missing."""


class StackMismatchError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


# -- averaged stacks ----------------------------------------------------------

@dataclass
class MeanStack:
    """Trigger-aligned per-pixel, per-frame mean of ``n`` acquisitions of pv."""

    pv: np.ndarray
    config: object
    n: int
    t0: float = 0.0

    @property
    def shape(self):
        return self.pv.shape


def _pv(stack) -> np.ndarray:
    if isinstance(stack, MeanStack):
        return stack.pv
    if isinstance(stack, FrameStack):
        return stack.pv
    return np.asarray(stack, dtype=float)


def _same_acquisition(a, b) -> bool:
    # acquisitions differ only by index/t0; everything else must match
    return a == b


def average_acquisitions(stacks: Iterable[FrameStack]) -> MeanStack:
    """Fixed-order float64 mean of pv over trigger-aligned acquisitions."""
    acc = None
    cfg = None
    n = 0
    for s in stacks:
        if acc is None:
            cfg = s.config
            acc = np.zeros(s.shape, dtype=np.float64)
        elif not _same_acquisition(s.config, cfg) or s.shape != acc.shape:
            raise StackMismatchError(f"acquisition {s.index} has a different configuration")
        acc += s.pv
        n += 1
    if n == 0:
        raise StackMismatchError("no acquisitions to average")
    return MeanStack(acc / n, cfg, n, 0.0)


class RunningMean:
    """Incremental fixed-order mean; ``mean()`` may be read at any point."""

    def __init__(self):
        self.acc = None
        self.n = 0
        self.config = None

    def add(self, stack: FrameStack) -> None:
        if self.acc is None:
            self.acc = np.zeros(stack.shape)
            self.config = stack.config
        elif not _same_acquisition(stack.config, self.config):
            raise StackMismatchError(f"acquisition {stack.index} has a different configuration")
        self.acc += stack.pv
        self.n += 1

    def mean(self) -> MeanStack:
        if not self.n:
            raise StackMismatchError("no acquisitions added")
        return MeanStack(self.acc / self.n, self.config, self.n)


# -- calibration --------------------------------------------------------------

@dataclass
class SlopeMap:
    slope: np.ndarray          # d(pv)/d(f_mw), codes per MHz
    f0: np.ndarray             # per-pixel resonance estimate, MHz (NaN if unknown)
    f_max: float               # MHz
    dead: np.ndarray           # bool
    floor: float
    scan: np.ndarray           # MHz
    curve: np.ndarray          # image-mean pv per scan step
    tstat: np.ndarray

    @property
    def live(self) -> np.ndarray:
        return ~self.dead


def _mean_and_sem(item):
    """Per-pixel mean pv and its standard error for one scan step."""
    if isinstance(item, (list, tuple)):
        parts = [_mean_and_sem(x) for x in item]
        m = sum(p[0] for p in parts) / len(parts)
        v = sum(p[1] ** 2 for p in parts) / len(parts) ** 2
        return m, np.sqrt(v)
    pv = _pv(item)
    if pv.ndim == 2:
        return pv, np.zeros_like(pv)
    frames = pv.shape[0]
    sem = pv.std(axis=0, ddof=1) / np.sqrt(frames) if frames > 1 else np.zeros(pv.shape[1:])
    return pv.mean(axis=0), sem


def _window_fit(f: np.ndarray, y: np.ndarray, k: int, half: int):
    """Least-squares line over scan points k-half..k+half, per pixel."""
    fw = f[k - half:k + half + 1]
    fc = fw - fw.mean()
    sxx = float(fc @ fc)
    yw = y[k - half:k + half + 1]
    slope = np.tensordot(fc, yw, axes=(0, 0)) / sxx
    mean = yw.mean(axis=0)
    return slope, mean, fw.mean(), sxx


def calibrate(stacks: Sequence, scan, offset=None, fit_points: int = 5,
              dead_fraction: float = 0.1, t_min: float = 5.0,
              min_good_fraction: float = 0.5) -> SlopeMap:
    """Per-pixel slope at the frequency of maximum image-mean |slope|.

    ``stacks[k]`` holds the acquisition(s) taken at ``scan[k]`` MHz. When a
    pixel ``offset`` (pv with zero demodulated signal) is given, f0 is
    estimated by extrapolating each pixel's line to zero signal.
    """
    f = np.asarray(scan, dtype=float)
    if f.ndim != 1 or f.size < fit_points or len(stacks) != f.size:
        raise ValueError(f"need at least {fit_points} scan steps with one entry per step")
    if np.any(np.diff(f) <= 0):
        raise ValueError("scan frequencies must be strictly increasing")
    means, sems = zip(*(_mean_and_sem(s) for s in stacks))
    y = np.stack(means)
    sem = np.stack(sems)
    span = f"{f[0]:.3f}-{f[-1]:.3f} MHz"
    if not np.any(y):
        raise CalibrationError(f"all calibration frames are dark over {span}")

    half = fit_points // 2
    ks = range(half, f.size - half)
    scores = []
    for k in ks:
        s, *_ = _window_fit(f, y, k, half)
        scores.append(np.mean(np.abs(s)))
    k_best = list(ks)[int(np.argmax(scores))]
    slope, ymean, fbar, sxx = _window_fit(f, y, k_best, half)
    noise = np.sqrt(np.mean(sem[k_best - half:k_best + half + 1] ** 2, axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.abs(slope) / (noise / np.sqrt(sxx))
    tstat = np.where(noise > 0, tstat, np.where(slope != 0, np.inf, 0.0))
    good = np.mean(tstat > t_min)
    if good < min_good_fraction:
        raise CalibrationError(
            f"no resonance slope found over {span}: only {good:.1%} of pixels significant")

    floor = slope_floor(slope, dead_fraction)
    dead = ~(np.abs(slope) > floor)
    if offset is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            f0 = fbar - (ymean - np.asarray(offset, float)) / slope
        f0 = np.where(dead, np.nan, f0)
    else:
        f0 = np.full(slope.shape, np.nan)
    return SlopeMap(slope, f0, float(f[k_best]), dead, floor, f, y.mean(axis=(1, 2)), tstat)


def pixel_offset(stacks) -> np.ndarray:
    """Per-pixel mean pv of a reference (zero-signal) stack or list of stacks."""
    if isinstance(stacks, (FrameStack, MeanStack)):
        stacks = [stacks]
    stacks = list(stacks)
    if not stacks:
        raise MissingReferenceError("no reference stacks given")
    return sum(_pv(s).mean(axis=0) for s in stacks) / len(stacks)


# -- field timeseries ---------------------------------------------------------

@dataclass
class PixelTimeseries:
    values: np.ndarray        # uT, frames first
    fps: float
    t0: float = 0.0
    n_averaged: int = 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.values.shape[0]) / self.fps

    def pixel(self, r: int, c: int) -> "PixelTimeseries":
        return PixelTimeseries(self.values[:, r, c], self.fps, self.t0, self.n_averaged)


def to_field(stack, slopes: SlopeMap, nv: NVModel, offset=None) -> PixelTimeseries:
    """Field (uT) per pixel and frame: (pv - offset) / slope / (df/dB)."""
    if offset is None:
        raise MissingReferenceError("a pixel offset reference is required")
    pv = _pv(stack)
    off = np.asarray(offset, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        b = (pv - off) / np.where(slopes.dead, np.nan, slopes.slope) / nv.mhz_per_tesla
    fps = stack.config.fps
    n = getattr(stack, "n", 1)
    return PixelTimeseries(b * T_TO_UT, fps, 0.0, n)


# -- spectra ------------------------------------------------------------------

@dataclass
class AmplitudeSpectrum:
    frequencies: np.ndarray
    amplitudes: np.ndarray

    @property
    def resolution(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])

    def at(self, f: float):
        k = int(np.argmin(np.abs(self.frequencies - f)))
        return self.amplitudes[k]


def spectrum(ts, fps: float | None = None) -> AmplitudeSpectrum:
    """Single-sided amplitude spectrum along the first axis.

    A pure tone of amplitude A on an exact bin reads A; the mean is removed.
    """
    if isinstance(ts, PixelTimeseries):
        x, fps = ts.values, ts.fps
    else:
        x = np.asarray(ts, dtype=float)
    if fps is None or not fps > 0:
        raise ValueError("sample rate required")
    n = x.shape[0]
    X = np.fft.rfft(x - x.mean(axis=0), axis=0)
    amp = np.abs(X) * (2.0 / n)
    if n % 2 == 0:
        amp[-1] *= 0.5
    return AmplitudeSpectrum(np.fft.rfftfreq(n, 1.0 / fps), amp)


def image_average_spectrum(ts: PixelTimeseries, mask=None) -> AmplitudeSpectrum:
    """Mean of per-pixel amplitude spectra over live (and masked-in) pixels."""
    sp = spectrum(ts)
    a = sp.amplitudes.reshape(sp.amplitudes.shape[0], -1)
    ok = np.all(np.isfinite(a), axis=0)
    if mask is not None:
        ok &= np.asarray(mask, bool).ravel()
    if not ok.any():
        raise ValueError("no valid pixels")
    return AmplitudeSpectrum(sp.frequencies, a[:, ok].mean(axis=1))


def dirichlet_envelope(f_tone: float, freqs, n: int, fps: float, amplitude: float = 1.0):
    """Rectangular-window leakage |D_n| of a real tone onto each bin."""
    freqs = np.asarray(freqs, float)

    def kernel(df):
        x = np.pi * df * n / fps
        y = np.pi * df / fps
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.abs(np.sin(x) / (n * np.sin(y)))
        return np.where(np.abs(np.sin(y)) < 1e-15, 1.0, k)

    # positive and negative frequency images of the real tone
    return amplitude * (kernel(freqs - f_tone) + kernel(freqs + f_tone))


# -- linearity ------------------------------------------------------------------

@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r2: float
    slope_se: float
    intercept_se: float


def linear_fit(x, y) -> LinearFit:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.size < 3 or x.size != y.size:
        raise DegenerateFitError("need at least three paired points")
    if np.ptp(x) == 0:
        raise DegenerateFitError("all x values are identical")
    res = stats.linregress(x, y)
    return LinearFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2),
                     float(res.stderr), float(res.intercept_stderr))


def ac_linearity(currents, amplitudes) -> LinearFit:
    """Least-squares line through recovered tone amplitude vs drive current."""
    return linear_fit(currents, amplitudes)


# -- pulses ---------------------------------------------------------------------

@dataclass
class PulseResult:
    amplitude: np.ndarray
    n_pulses: int
    on_frames: np.ndarray
    off_frames: np.ndarray


def pulse_frames(n_frames: int, fps: float, period_ms: float, fwd_ms: float,
                 rev_ms: float = 0.0, skip_periods: int = 1, t0: float = 0.0):
    """Frames lying fully inside forward pulses and fully inside quiet gaps."""
    period, fwd, rev = period_ms * 1e-3, fwd_ms * 1e-3, rev_ms * 1e-3
    window = n_frames / fps
    if period > window:
        raise ValueError(f"pulse period {period_ms} ms exceeds the {window * 1e3:.1f} ms window")
    start = t0 + np.arange(n_frames) / fps
    stop = start + 1.0 / fps
    k = np.floor(start / period + 1e-9)
    eps = 1e-9 * period
    full = ((k + 1) * period <= t0 + window + eps) & (k >= skip_periods)
    rel0 = start - k * period
    rel1 = stop - k * period
    on = full & (rel0 >= -eps) & (rel1 <= fwd + eps)
    off = full & (rel0 >= fwd + rev - eps) & (rel1 <= period + eps)
    n_pulses = max(0, int(np.floor(window / period + 1e-9)) - skip_periods)
    return on, off, n_pulses


def pulse_metrics(ts: PixelTimeseries, period_ms: float, fwd_ms: float, rev_ms: float = 0.0,
                  skip_periods: int = 1) -> PulseResult:
    """Mean in-pulse minus mean between-pulse field, per pixel."""
    v = ts.values
    on, off, n_pulses = pulse_frames(v.shape[0], ts.fps, period_ms, fwd_ms, rev_ms,
                                     skip_periods, ts.t0)
    if not on.any() or not off.any():
        raise ValueError("no frames fall fully inside the pulses or the gaps")
    amp = v[on].mean(axis=0) - v[off].mean(axis=0)
    return PulseResult(amp, n_pulses, np.flatnonzero(on), np.flatnonzero(off))


# -- SNR masking ------------------------------------------------------------------

@dataclass
class SnrMaskedMap:
    values: np.ndarray     # signal where included, 0 elsewhere
    signal: np.ndarray
    noise: np.ndarray
    mask: np.ndarray
    threshold: float


def snr_mask(signal, noise, threshold: float = 3.0) -> SnrMaskedMap:
    """Keep pixels with |signal| / noise strictly above ``threshold``.

    Pixels with zero or non-finite noise are dead and always excluded.
    """
    s = np.asarray(signal, float)
    n = np.asarray(noise, float)
    if s.shape != n.shape:
        raise ValueError("signal and noise maps differ in shape")
    ok = np.isfinite(s) & np.isfinite(n) & (n > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        mask = ok & (np.abs(s) / np.where(ok, n, 1.0) > threshold)
    return SnrMaskedMap(np.where(mask, s, 0.0), s, n, mask, float(threshold))


def masked_average(ts: PixelTimeseries, mask, sign=None) -> np.ndarray:
    """All-masked-pixel average trace.

    ``sign`` (e.g. the signal map) flips pixels whose polarity opposes the
    dominant one, so the trace keeps the majority pixels' polarity.
    """
    m = np.asarray(mask, bool)
    if not m.any():
        raise ValueError("empty mask")
    v = ts.values[:, m]
    if sign is not None:
        s = np.asarray(sign, float)[m]
        v = v * (np.sign(s) * (np.sign(s.sum()) or 1.0))
    return v.mean(axis=1)


def pixel_noise(ts: PixelTimeseries, frames) -> np.ndarray:
    """Per-pixel std (ddof=1) over the selected frames."""
    return ts.values[frames].std(axis=0, ddof=1)


# -- noise statistics ------------------------------------------------------------

@dataclass
class NoiseStats:
    n: np.ndarray              # acquisition counts at checkpoints
    std_ut: np.ndarray         # all-pixel average std at each checkpoint
    pixel_std: np.ndarray      # per-pixel std at the last checkpoint (uT)
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    sensitivity_nt: float      # nT/sqrt(Hz) at the last checkpoint
    quiet_frames: np.ndarray

    def density(self, points: int = 512):
        """Gaussian-kernel density of the per-pixel noise on a regular grid."""
        v = self.pixel_std[np.isfinite(self.pixel_std)]
        grid = np.linspace(v.min(), v.max(), points)
        return grid, stats.gaussian_kde(v)(grid)

    @property
    def mode(self) -> float:
        grid, d = self.density()
        return float(grid[int(np.argmax(d))])

    @property
    def n_modes(self) -> int:
        _, d = self.density()
        inner = (d[1:-1] > d[:-2]) & (d[1:-1] >= d[2:])
        return int(inner.sum() + (d[0] > d[1]) + (d[-1] > d[-2]))

    @property
    def skewness(self) -> float:
        return float(stats.skew(self.pixel_std[np.isfinite(self.pixel_std)]))


def quiet_frames(n_frames: int, fps: float, window, period: float | None = None,
                 signal: Callable | None = None) -> np.ndarray:
    """Frames fully inside ``window`` = (start, stop) seconds, repeated every
    ``period`` when given. Raises if ``signal`` is nonzero anywhere inside."""
    a, b = window
    if not b > a:
        raise ValueError("quiet window must have positive length")
    start = np.arange(n_frames) / fps
    stop = start + 1.0 / fps
    if period is not None:
        k = np.floor(start / period + 1e-9)
        start, stop = start - k * period, stop - k * period
    eps = 1e-12
    sel = np.flatnonzero((start >= a - eps) & (stop <= b + eps))
    if sel.size < 3:
        raise ValueError("quiet window holds fewer than 3 frames")
    if signal is not None:
        probe = np.linspace(a, b, 257)
        offsets = [0.0] if period is None else np.arange(int(n_frames / fps / period) + 1) * period
        if any(np.any(np.asarray(signal(probe + o)) != 0) for o in offsets):
            raise ValueError("quiet window overlaps an applied signal")
    return sel


def noise_stats(stacks: Iterable[FrameStack], slopes: SlopeMap, nv: NVModel, offset,
                window, period: float | None = None, checkpoints=None,
                signal: Callable | None = None, pixels=None) -> NoiseStats:
    """Field noise in a quiet window vs number of averaged acquisitions.

    ``pixels`` restricts the pixel set (e.g. the usable sensor area).
    """
    rm = RunningMean()
    ns, stds = [], []
    sel = None
    last = None
    chk = None if checkpoints is None else set(int(c) for c in checkpoints)
    live = slopes.live if pixels is None else slopes.live & np.asarray(pixels, bool)
    for s in stacks:
        rm.add(s)
        if sel is None:
            sel = quiet_frames(s.shape[0], s.config.fps, window, period, signal)
        if chk is None or rm.n in chk:
            ts = to_field(rm.mean(), slopes, nv, offset)
            last = pixel_noise(ts, sel)
            ns.append(rm.n)
            stds.append(float(np.mean(last[live])))
    if last is None:
        raise StackMismatchError("no acquisitions reached a checkpoint")
    vals = last[live]
    counts, edges = np.histogram(vals, bins="fd")
    fps = rm.config.fps
    return NoiseStats(np.array(ns), np.array(stds), np.where(live, last, np.nan),
                      counts, edges, float(stds[-1] * 1e3 / np.sqrt(fps / 2)), sel)


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    exponent_se: float
    prefactor: float
    max_log_residual: float


def fit_power_law(n, y) -> PowerLawFit:
    """Fit y = a n^p in log-log space."""
    fit = linear_fit(np.log(np.asarray(n, float)), np.log(np.asarray(y, float)))
    resid = np.log(y) - (fit.intercept + fit.slope * np.log(n))
    return PowerLawFit(fit.slope, fit.slope_se, float(np.exp(fit.intercept)),
                       float(np.max(np.abs(resid))))


# -- ODMR contrast ----------------------------------------------------------------

@dataclass(frozen=True)
class LorentzFit:
    contrast: float
    f0: float
    linewidth: float
    baseline: float


def fit_lorentzian(freqs, values, f0_guess: float | None = None,
                   linewidth_guess: float = 1.0) -> LorentzFit:
    """Fit baseline * (1 - C G^2/((f-f0)^2+G^2)) to an intensity spectrum."""
    f = np.asarray(freqs, float)
    y = np.asarray(values, float)
    base = float(np.max(y))
    if base <= 0:
        raise CalibrationError("intensity spectrum is dark")
    if f0_guess is None:
        f0_guess = float(f[np.argmin(y)])
    c_guess = max(1e-4, 1 - float(np.min(y)) / base)

    def model(x, b, c, x0, g):
        return b * (1 - c * g * g / ((x - x0) ** 2 + g * g))

    p, _ = optimize.curve_fit(model, f, y, p0=[base, c_guess, f0_guess, linewidth_guess],
                              maxfev=20000)
    return LorentzFit(float(p[1]), float(p[2]), float(abs(p[3])), float(p[0]))


# -- camera-driven helpers ----------------------------------------------------------

def calibration_stacks(cam: LockInCamera, scan, frames: int = 50, averages: int = 1,
                       scene: SeparableScene | None = None) -> list:
    """Zero-signal acquisitions at each scan frequency (lists of ``averages``)."""
    out = []
    for k, f in enumerate(scan):
        c = cam.with_config(f_mw=float(f), frames_per_acq=int(frames))
        exp = c.expectation(scene)
        out.append([c.acquire(exp, 1_000_000 + k * averages + j) for j in range(averages)])
    return out


def coarse_feature(freqs, curve, min_depth: float = 5.0) -> float:
    """Lowest-frequency dispersive feature in a coarse image-mean pv sweep.

    The feature centre is the zero crossing between the lobe pair, located
    as the midpoint of the first peak and the following trough of the pv
    deviation from the baseline. Baseline and noise come from the outer
    tenth of the scan at each end, which must lie off resonance.
    """
    f = np.asarray(freqs, float)
    y = np.asarray(curve, float)
    m = max(3, f.size // 10)
    edges = np.concatenate([y[:m], y[-m:]])
    dev = y - np.median(edges)
    noise = stats.median_abs_deviation(np.diff(edges), scale="normal") / np.sqrt(2)
    thr = max(min_depth, 5 * noise)
    idx = np.flatnonzero(np.abs(dev) > thr)
    if idx.size == 0:
        raise CalibrationError(f"no resonance found over {f[0]:.1f}-{f[-1]:.1f} MHz")
    # first run of significant points and its opposite-sign partner
    first = idx[0]
    sign = np.sign(dev[first])
    run = first
    while run + 1 < f.size and np.sign(dev[run + 1]) == sign and abs(dev[run + 1]) > thr / 4:
        run += 1
    seg1 = slice(first, run + 1)
    k1 = first + int(np.argmax(np.abs(dev[seg1])))
    rest = np.flatnonzero((np.sign(dev) == -sign) & (np.abs(dev) > thr) & (np.arange(f.size) > run))
    if rest.size == 0:
        return float(f[k1])
    j0 = rest[0]
    j1 = j0
    while j1 + 1 < f.size and np.sign(dev[j1 + 1]) == -sign:
        j1 += 1
    k2 = j0 + int(np.argmax(np.abs(dev[j0:j1 + 1])))
    return float(0.5 * (f[k1] + f[k2]))
