"""Lock-in camera model.

Each pixel's fluorescence is sampled ``oversample`` times per modulation
half-period while the microwave toggles between f_mw + dev and f_mw - dev.
The camera multiplies by square references in phase and in quadrature and
integrates over the frame. Both references are +/-1, so within one frame the
samples fall into four quadrants (sign of I ref, sign of Q ref) and

    I = n(++) + n(+-) - n(-+) - n(--)
    Q = n(++) - n(+-) + n(-+) - n(--)

where n(.) is the photon count collected in that quadrant. A sum of
independent Poisson counts is Poisson, so one draw per (frame, quadrant)
reproduces per-sample shot noise exactly.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from .geometry import CircuitLayout, PixelGrid, field_map
from .nv import NVModel, draw_f0_scatter, resonance_frequencies

H_PLANCK = 6.62607015e-34
C_LIGHT = 2.99792458e8

CODE_MAX = 1023
# RNG stream tags: one independent family per physical noise source
_DIAMOND, _OFFSETS, _ACQ, _INTENSITY = 0, 1, 2, 3


class CameraConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AcquisitionConfig:
    fps: float = 650.0
    f_mod: float = 2600.0
    frames_per_acq: int = 500
    n_acquisitions: int = 1
    photons_per_pixel_per_frame: float = 1.66e6
    trigger_phase: float = 0.0
    seed: int = 0
    f_mw: float = 2870.0                 # MHz
    oversample: int = 8                  # samples per modulation half-period
    illumination_ratio: float = 1.0      # max/min of a linear gradient along x
    full_scale_codes: float = 10000.0    # codes for one frame of mean fluorescence
    intensity_full_scale: float = 800.0  # same, for intensity (non lock-in) mode
    offset_i: int = 512
    offset_q: int = 64
    offset_spread: int = 8
    dead_time: float = 8.0               # s between acquisitions, no physics
    gaussian_above: float = 1000.0
    desync_threshold: float | None = None  # Hz; None disables
    desync_rolloff_per_khz: float = 0.05

    def __post_init__(self):
        if not self.fps > 0:
            raise CameraConfigError("fps must be positive")
        if self.f_mod < 2 * self.fps:
            raise CameraConfigError(
                f"f_mod {self.f_mod} Hz is below two cycles per frame at {self.fps} fps")
        if int(self.frames_per_acq) < 1 or int(self.n_acquisitions) < 1:
            raise CameraConfigError("frame and acquisition counts must be >= 1")
        if self.photons_per_pixel_per_frame < 0:
            raise CameraConfigError("photon budget must be >= 0")
        if self.oversample < 2 or self.oversample % 2:
            raise CameraConfigError("oversample must be an even number >= 2")
        if self.illumination_ratio < 1:
            raise CameraConfigError("illumination_ratio must be >= 1")
        if not 0 <= self.offset_i <= CODE_MAX or not 0 <= self.offset_q <= CODE_MAX:
            raise CameraConfigError("offset codes must lie in the 10-bit range")

    @property
    def frame_period(self) -> float:
        return 1.0 / self.fps

    @property
    def duration(self) -> float:
        return self.frames_per_acq / self.fps

    def t0(self, index: int) -> float:
        return index * (self.duration + self.dead_time)


def photon_budget_from_power(power_per_pixel: float, wavelength_nm: float, frame_period: float) -> float:
    """Mean detected photons per pixel per frame."""
    if power_per_pixel < 0:
        raise ValueError("power must be >= 0")
    e_photon = H_PLANCK * C_LIGHT / (wavelength_nm * 1e-9)
    return power_per_pixel * frame_period / e_photon


def desync_attenuation(f_mod: float, threshold: float | None = None,
                       rolloff_per_khz: float = 0.05, floor: float = 0.0) -> float:
    """Demodulated-signal gain lost to camera/generator desynchronization.

    Linear roll-off of ``rolloff_per_khz`` above ``threshold``; 1.0 when
    disabled.
    """
    if not f_mod > 0:
        raise ValueError("f_mod must be positive")
    if threshold is None or f_mod <= threshold:
        return 1.0
    return float(max(floor, 1.0 - rolloff_per_khz * (f_mod - threshold) / 1e3))


def pv_amplitude(i, q):
    """Lock-in amplitude sqrt(I^2 + Q^2), clamped to the 10-bit range."""
    i = np.asarray(i, dtype=float)
    q = np.asarray(q, dtype=float)
    out = np.minimum(np.sqrt(i * i + q * q), CODE_MAX)
    return float(out) if out.ndim == 0 else out


def quantize(x) -> np.ndarray:
    return np.clip(np.rint(x), 0, CODE_MAX).astype(np.int16)


@dataclass
class FrameStack:
    """One acquisition of quantized I/Q frames, shape (frames, rows, cols)."""

    i: np.ndarray
    q: np.ndarray
    config: AcquisitionConfig
    t0: float = 0.0
    index: int = 0

    @property
    def shape(self):
        return self.i.shape

    @property
    def pv(self) -> np.ndarray:
        return pv_amplitude(self.i, self.q)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.i.shape[0]) / self.config.fps


# -- scenes -------------------------------------------------------------------

@dataclass
class SeparableScene:
    """Projected field B(pixel, t) = pattern[pixel] * signal(t), in tesla.

    ``signal=None`` makes the scene static. Time is measured from the
    acquisition trigger.
    """

    pattern: np.ndarray
    signal: Callable | None = None

    @property
    def static(self) -> bool:
        return self.signal is None

    @property
    def shape(self):
        return self.pattern.shape

    def field(self, t) -> np.ndarray:
        w = np.ones_like(np.asarray(t, float)) if self.signal is None else np.asarray(self.signal(t), float)
        return self.pattern[..., None] * w


def zero_scene(grid: PixelGrid) -> SeparableScene:
    return SeparableScene(np.zeros(grid.shape))


def circuit_scene(layout: CircuitLayout, waveform, grid: PixelGrid,
                  standoff: float, axis) -> SeparableScene:
    """Scene of a circuit driven by ``waveform`` (A), projected on ``axis``."""
    per_amp = field_map(layout, 1.0, grid, standoff, axis).values
    return SeparableScene(per_amp, waveform)


# -- timing -------------------------------------------------------------------

@dataclass(frozen=True)
class _Timing:
    t: np.ndarray          # sample times, sorted by (frame, quadrant)
    mw_high: np.ndarray    # microwave at f_mw + dev
    starts: np.ndarray     # reduceat boundaries, one per (frame, quadrant)
    n_high: np.ndarray     # (frames, 4) sample counts with mw high
    n_low: np.ndarray
    samples_per_frame: float


def _timing(acq: AcquisitionConfig) -> _Timing:
    os_ = int(acq.oversample)
    cycles_per_frame = acq.f_mod / acq.fps
    n_total = int(np.floor(acq.frames_per_acq * cycles_per_frame * 2 * os_ + 1e-9))
    j = np.arange(n_total)
    cyc = (j + 0.5) / (2 * os_)
    ref_i = np.mod(cyc, 1.0) < 0.5
    ref_q = np.mod(cyc - 0.25, 1.0) < 0.5
    mw_high = np.mod(cyc + acq.trigger_phase / (2 * np.pi), 1.0) < 0.5
    frame = np.minimum((cyc / cycles_per_frame).astype(np.int64), acq.frames_per_acq - 1)
    quad = 2 * (~ref_i) + (~ref_q)
    key = frame * 4 + quad
    order = np.argsort(key, kind="stable")
    key_s = key[order]
    n_keys = acq.frames_per_acq * 4
    if np.unique(key_s).size != n_keys:
        raise CameraConfigError("every frame needs samples in all four reference quadrants")
    starts = np.flatnonzero(np.r_[True, np.diff(key_s) != 0])
    hi = mw_high[order]
    n_high = np.bincount(key_s, weights=hi, minlength=n_keys).reshape(-1, 4)
    n_low = np.bincount(key_s, weights=~hi, minlength=n_keys).reshape(-1, 4)
    return _Timing(cyc[order] / acq.f_mod, hi, starts, n_high, n_low,
                   2 * os_ * cycles_per_frame)


def _quad_to_iq(m: np.ndarray):
    i = (m[..., 0] + m[..., 1]) - (m[..., 2] + m[..., 3])
    q = (m[..., 0] - m[..., 1]) + (m[..., 2] - m[..., 3])
    return i, q


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass
class Expectation:
    """Noiseless mean photon count per (frame, row, col, quadrant)."""

    quad: np.ndarray
    config: AcquisitionConfig
    _codes: tuple | None = field(default=None, repr=False)


class LockInCamera:
    """A camera looking at one diamond sample.

    Per-pixel resonance scatter and per-pixel offset codes are drawn once
    from ``acq.seed``; shot noise is drawn per acquisition from streams keyed
    by (seed, acquisition index, row), so results do not depend on
    ``workers``.
    """

    def __init__(self, nv: NVModel, acq: AcquisitionConfig, grid: PixelGrid,
                 bias=(0.0, 0.0, 0.0), f0_scatter: float = 0.1, workers: int = 1):
        self.nv = nv
        self.acq = acq
        self.grid = grid
        self.bias = np.asarray(bias, dtype=float)
        self.f0_scatter = float(f0_scatter)
        self.workers = max(1, int(workers))
        shape = grid.shape

        self.scatter = draw_f0_scatter(shape, self.f0_scatter, _stream(acq.seed, _DIAMOND))
        self.f0 = nv.sensing_center(self.bias) + self.scatter

        res = resonance_frequencies(self.bias, nv)
        keep = ~((res.axis == nv.sensing) & (res.branch == -1))
        self.other_lines = res.frequencies[keep]

        rng = _stream(acq.seed, _OFFSETS)
        s = int(acq.offset_spread)
        self.offset_i = np.clip(acq.offset_i + rng.integers(-s, s + 1, size=shape), 0, CODE_MAX)
        self.offset_q = np.clip(acq.offset_q + rng.integers(-s, s + 1, size=shape), 0, CODE_MAX)

        ramp = np.linspace(1.0, acq.illumination_ratio, grid.cols)
        ramp = ramp / ramp.mean()
        self.photons = acq.photons_per_pixel_per_frame * np.broadcast_to(ramp, shape).copy()
        phi = acq.photons_per_pixel_per_frame
        self.gain = acq.full_scale_codes / phi if phi > 0 else 0.0
        self.intensity_gain = acq.intensity_full_scale / phi if phi > 0 else 0.0
        self.demod_gain = desync_attenuation(acq.f_mod, acq.desync_threshold,
                                             acq.desync_rolloff_per_khz)
        self._timing = _timing(acq)

    def with_config(self, **changes) -> "LockInCamera":
        """Same diamond and camera, different acquisition settings."""
        acq = replace(self.acq, **changes)
        return LockInCamera(self.nv, acq, self.grid, self.bias, self.f0_scatter, self.workers)

    # -- helpers ---------------------------------------------------------------

    def _row_blocks(self, rows_per_block: int):
        return [slice(r, min(r + rows_per_block, self.grid.rows))
                for r in range(0, self.grid.rows, rows_per_block)]

    def _map(self, fn, blocks):
        if self.workers == 1:
            return [fn(b) for b in blocks]
        with ThreadPoolExecutor(self.workers) as ex:
            return list(ex.map(fn, blocks))

    def _background(self, f, rows) -> np.ndarray:
        """Dip depth (negative) of all non-sensing lines at frequency f."""
        nv = self.nv
        g2 = nv.linewidth ** 2
        out = np.zeros_like(self.scatter[rows])
        for fk in self.other_lines:
            d = f - (fk + self.scatter[rows])
            out -= nv.contrast * g2 / (d * d + g2)
        return out

    def _fluorescence(self, f_state, rows, shift=None):
        """Normalized fluorescence of pixels ``rows`` at microwave frequency f_state."""
        nv = self.nv
        g2 = nv.linewidth ** 2
        f0 = self.f0[rows]
        if shift is not None:
            f0 = f0[..., None] - shift
            d = f_state - f0
        else:
            d = f_state - f0
        return 1.0 - nv.contrast * g2 / (d * d + g2)

    # -- expectation -----------------------------------------------------------

    def expectation(self, scene: SeparableScene | None = None) -> Expectation:
        """Mean photon counts per frame and reference quadrant for ``scene``."""
        if scene is None:
            scene = zero_scene(self.grid)
        if scene.shape != self.grid.shape:
            raise ValueError("scene and grid shapes differ")
        acq, tm, nv = self.acq, self._timing, self.nv
        f_hi = acq.f_mw + nv.fm_deviation
        f_lo = acq.f_mw - nv.fm_deviation
        g = self.demod_gain
        frames = acq.frames_per_acq
        out = np.empty((frames,) + self.grid.shape + (4,))
        ppx = self.photons / tm.samples_per_frame

        if scene.static:
            def block(rows):
                b = scene.pattern[rows] * nv.mhz_per_tesla
                f0s = self.f0[rows] - b
                lh = 1.0 - nv.contrast * nv.linewidth ** 2 / ((f_hi - f0s) ** 2 + nv.linewidth ** 2)
                ll = 1.0 - nv.contrast * nv.linewidth ** 2 / ((f_lo - f0s) ** 2 + nv.linewidth ** 2)
                lh = lh + self._background(f_hi, rows)
                ll = ll + self._background(f_lo, rows)
                avg = 0.5 * (lh + ll)
                lh, ll = avg + g * (lh - avg), avg + g * (ll - avg)
                m = (tm.n_high[:, None, None, :] * lh[None, :, :, None]
                     + tm.n_low[:, None, None, :] * ll[None, :, :, None])
                out[:, rows] = m * ppx[rows][None, :, :, None]
            self._map(block, self._row_blocks(self.grid.rows))
            return Expectation(out, acq)

        w = np.asarray(scene.signal(tm.t), dtype=float) * nv.mhz_per_tesla
        f_state = np.where(tm.mw_high, f_hi, f_lo)
        g2 = nv.linewidth ** 2
        n_s = tm.t.size
        per_row = self.grid.cols * n_s
        rows_per_block = max(1, int(4_000_000 // per_row))

        def block(rows):
            shift = scene.pattern[rows][..., None] * w            # MHz, (r, c, s)
            d = f_state - (self.f0[rows][..., None] - shift)
            lor = g2 / (d * d + g2)
            if g != 1.0:
                d_other = np.where(tm.mw_high, f_lo, f_hi) - (self.f0[rows][..., None] - shift)
                lor_other = g2 / (d_other * d_other + g2)
                lor = 0.5 * (lor + lor_other) + g * 0.5 * (lor - lor_other)
            sums = np.add.reduceat(lor, tm.starts, axis=-1)       # (r, c, frames*4)
            sums = sums.reshape(sums.shape[:2] + (frames, 4)).transpose(2, 0, 1, 3)
            bh = self._background(f_hi, rows)
            bl = self._background(f_lo, rows)
            avg = 0.5 * (bh + bl)
            bh, bl = avg + g * (bh - avg), avg + g * (bl - avg)
            n_all = (tm.n_high + tm.n_low)[:, None, None, :]
            m = (n_all - nv.contrast * sums
                 + tm.n_high[:, None, None, :] * bh[None, :, :, None]
                 + tm.n_low[:, None, None, :] * bl[None, :, :, None])
            out[:, rows] = m * ppx[rows][None, :, :, None]

        self._map(block, self._row_blocks(rows_per_block))
        return Expectation(out, acq)

    def _code_moments(self, exp: Expectation):
        """Mean, std and I/Q correlation of the code-domain (I, Q), cached."""
        if exp._codes is None:
            m = exp.quad
            mu_i, mu_q = self.expected_iq(exp)
            tot = m.sum(axis=-1)
            cov = (m[..., 0] + m[..., 3]) - (m[..., 1] + m[..., 2])
            with np.errstate(divide="ignore", invalid="ignore"):
                rho = np.where(tot > 0, cov / tot, 0.0)
            sd = self.gain * np.sqrt(tot)
            small = np.any(m < self.acq.gaussian_above, axis=-1)
            exp._codes = (mu_i, mu_q, sd, rho * sd, np.sqrt(np.maximum(0.0, 1 - rho * rho)) * sd, small)
        return exp._codes

    def expected_iq(self, exp: Expectation):
        """Unquantized noiseless I and Q codes."""
        i, q = _quad_to_iq(exp.quad)
        return self.gain * i + self.offset_i, self.gain * q + self.offset_q

    def expected_pv(self, exp: Expectation) -> np.ndarray:
        i, q = self.expected_iq(exp)
        return pv_amplitude(i, q)

    # -- noisy acquisition -----------------------------------------------------

    def acquire(self, exp: Expectation, index: int = 0) -> FrameStack:
        """Draw shot noise and quantize one acquisition."""
        acq = self.acq
        shape = (acq.frames_per_acq,) + self.grid.shape
        if acq.photons_per_pixel_per_frame == 0:
            z = np.zeros(shape, dtype=np.int16)
            return FrameStack(z, z.copy(), acq, acq.t0(index), index)
        i_out = np.empty(shape, dtype=np.int16)
        q_out = np.empty(shape, dtype=np.int16)
        mu_i, mu_q, sd, a, b, small = self._code_moments(exp)

        def row(r):
            # (I, Q) is a linear map of four independent quadrant counts; in the
            # Gaussian regime it is exactly bivariate normal, so two draws suffice
            rng = _stream(acq.seed, _ACQ, int(index), int(r))
            z = rng.standard_normal((2,) + mu_i[:, r].shape)
            i = mu_i[:, r] + sd[:, r] * z[0]
            q = mu_q[:, r] + a[:, r] * z[0] + b[:, r] * z[1]
            sm = small[:, r]
            if sm.any():
                n = rng.poisson(exp.quad[:, r][sm])
                ip, qp = _quad_to_iq(n)
                i[sm] = self.gain * ip + np.broadcast_to(self.offset_i[r], sm.shape)[sm]
                q[sm] = self.gain * qp + np.broadcast_to(self.offset_q[r], sm.shape)[sm]
            i_out[:, r] = quantize(i)
            q_out[:, r] = quantize(q)

        if self.workers == 1:
            for r in range(self.grid.rows):
                row(r)
        else:
            with ThreadPoolExecutor(self.workers) as ex:
                list(ex.map(row, range(self.grid.rows)))
        return FrameStack(i_out, q_out, acq, acq.t0(index), index)

    def acquisitions(self, scene: SeparableScene | None = None, n: int | None = None,
                     start: int = 0) -> Iterator[FrameStack]:
        """Trigger-aligned acquisitions ``start .. start+n-1`` of ``scene``."""
        exp = self.expectation(scene)
        n = self.acq.n_acquisitions if n is None else n
        for k in range(start, start + n):
            yield self.acquire(exp, k)

    def intensity_frames(self, f_mw: float, frames: int = 50, index: int = 0) -> np.ndarray:
        """Intensity-mode frames (no FM, no demodulation) at CW frequency f_mw."""
        shape = (frames,) + self.grid.shape
        if self.acq.photons_per_pixel_per_frame == 0:
            return np.zeros(shape, dtype=np.int16)
        rows = slice(None)
        mean = self.photons * (self._fluorescence(f_mw, rows) + self._background(f_mw, rows))
        rng = _stream(self.acq.seed, _INTENSITY, int(index))
        n = mean + np.sqrt(mean) * rng.standard_normal(shape)
        return quantize(self.intensity_gain * n)


def synthesize_acquisition(scene: SeparableScene, nv: NVModel, acq: AcquisitionConfig,
                           grid: PixelGrid, rng_seed: int | None = None, index: int = 0,
                           bias=(0.0, 0.0, 0.0), workers: int = 1) -> FrameStack:
    """One-shot convenience wrapper around :class:`LockInCamera`."""
    if rng_seed is not None:
        acq = replace(acq, seed=int(rng_seed))
    cam = LockInCamera(nv, acq, grid, bias=bias, workers=workers)
    return cam.acquire(cam.expectation(scene), index)
