"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers; the lines are repeated in the terminal summary.
"""

import json
import time

import numpy as np
import pytest
from scipy import ndimage
from scipy import stats as sstats

from conftest import (AXIS, F_CENTER, analytic_pv_slope, calibrate_camera, make_camera,
                      noiseless_calibration, record)
from nvwidefield import cli, recon
from nvwidefield import formats as fmt
from nvwidefield import waveforms as wf
from nvwidefield.camera import CODE_MAX, SeparableScene, quantize
from nvwidefield.config import load_config
from nvwidefield.geometry import (CircuitLayout, PixelGrid, WireSegment, field_at_point, field_map,
                                 make_cross_layout)
from nvwidefield.nv import slope_dpvdf

MU0 = 4e-7 * np.pi
TRACK_PX = (32, 41)   # x = -5.75 um, next to the track edge of the y-current path
FAR_PX = (32, 6)      # x = -58.25 um, 53 um beyond the track edge


# -- 1 --------------------------------------------------------------------------

def test_criterion_1_infinite_wire():
    t = time.perf_counter()
    wire = CircuitLayout((WireSegment((0, -1e6, 0), (0, 1e6, 0), 10.0),))
    b = np.linalg.norm(field_at_point(wire, 0.020, (0, 0, 10.0)).B)
    dt = time.perf_counter() - t
    want = MU0 * 0.020 / (2 * np.pi * 10e-6)
    rel = abs(b / want - 1)
    ok = rel < 1e-6 and dt < 1.0
    record("1", ok, f"|B| = {b * 1e6:.9f} uT vs {want * 1e6:.6f} uT, rel err {rel:.2e}, {dt:.3f} s")
    assert ok


# -- 2 --------------------------------------------------------------------------

def _low_strip(values, grid, track_half, max_offset):
    """Near-zero pixels forming one connected strip along an x-directed track."""
    low = np.abs(values) < 0.05
    near = np.abs(grid.y)[:, None] <= track_half + max_offset
    lab, _ = ndimage.label(low & near & (np.abs(grid.y)[:, None] > track_half))
    for k in range(1, lab.max() + 1):
        comp = lab == k
        if comp.any(axis=0).all():
            return comp
    return None


def test_criterion_2_field_maps():
    t = time.perf_counter()
    grid = PixelGrid.centered(300, 300, 1.5)
    ymap = field_map(make_cross_layout(axis="y"), 0.020, grid, 10.0, AXIS).normalized().values
    xmap = field_map(make_cross_layout(axis="x"), 0.020, grid, 10.0, AXIS).normalized().values
    dt = time.perf_counter() - t

    # (a) global maximum within 2 px of the 10 um track
    r, c = np.unravel_index(np.argmax(np.abs(ymap)), ymap.shape)
    dist_y = max(0.0, abs(grid.x[c]) - 5.0) / grid.pitch
    r, c = np.unravel_index(np.argmax(np.abs(xmap)), xmap.shape)
    dist_x = max(0.0, abs(grid.y[r]) - 5.0) / grid.pitch
    ok_a = dist_y <= 2 and dist_x <= 2

    # (b) peak along the centre line inside the narrowing vs out on the arms
    along = np.abs(grid.y)
    centre = np.abs(ymap[along <= 7.5]).max()
    arms = np.abs(ymap[along >= 30.0]).max()
    ratio = centre / arms
    ok_b = ratio >= 1.5

    # (c) x-current: connected near-zero strip running beside the track
    strip = _low_strip(xmap, grid, 5.0, 15.0)
    ok_c = strip is not None
    rows = np.flatnonzero(strip.any(axis=1)) if ok_c else np.array([])
    where = f"y {grid.y[rows].min():.2f}..{grid.y[rows].max():.2f} um" if ok_c else "none"

    ok = ok_a and ok_b and ok_c and dt < 10
    record("2", ok, f"(a) {'PASS' if ok_a else 'FAIL'} max offset {dist_y:.1f}/{dist_x:.1f} px; "
                    f"(b) {'PASS' if ok_b else 'FAIL'} centre/arm {ratio:.3f} (need >= 1.5); "
                    f"(c) {'PASS' if ok_c else 'FAIL'} strip {where}; {dt:.2f} s")
    assert ok_a and ok_c and dt < 10
    assert ok_b, f"centre/arm peak ratio {ratio:.3f} < 1.5 under the line-current model"


# -- 3 --------------------------------------------------------------------------

def test_criterion_3_linearity():
    t = time.perf_counter()
    cfg = load_config("linearity")
    cam0 = cfg.build_camera()
    currents = np.array([1, 2, 4, 10, 20.0])
    quiet_sm, quiet_off = noiseless_calibration(cam0)
    noisy_sm, noisy_off = calibrate_camera(cam0)
    amps = {"noiseless": [], "noisy": []}
    for i_ma in currents:
        scene = cfg.replace(current_ma=float(i_ma)).build_scene()
        for kind, sm, off in (("noiseless", quiet_sm, quiet_off), ("noisy", noisy_sm, noisy_off)):
            cam = cam0.with_config(f_mw=sm.f_max)
            exp = cam.expectation(scene)
            if kind == "noiseless":
                mean = recon.MeanStack(cam.expected_pv(exp), cam.acq, 1)
            else:
                mean = recon.average_acquisitions(cam.acquire(exp, k) for k in range(16))
            ts = recon.to_field(mean, sm, cam.nv, off)
            amps[kind].append(recon.spectrum(ts.pixel(*TRACK_PX)).at(cfg.frequency_hz))
    dt = time.perf_counter() - t
    r2q = recon.ac_linearity(currents, amps["noiseless"]).r2
    r2n = recon.ac_linearity(currents, amps["noisy"]).r2
    ok = r2q > 0.999 and r2n > 0.99 and dt < 120
    record("3", ok, f"R2 noiseless {r2q:.6f} (>0.999), N=16 {r2n:.6f} (>0.99); "
                    f"amplitudes {np.round(amps['noisy'], 2).tolist()} uT; {dt:.1f} s")
    assert ok


# -- 4 --------------------------------------------------------------------------

def test_criterion_4_spectral_recovery():
    t = time.perf_counter()
    cfg = load_config("ac130")
    cam = cfg.build_camera()
    sm, off = noiseless_calibration(cam)
    cam = cam.with_config(f_mw=sm.f_max)
    a_ut = 2.0
    n, fps = cfg.frames_per_acq, cfg.fps_hz
    # tone held constant over each frame, so the frame samples are exact
    tone = wf.sampled(np.sin(2 * np.pi * 130.0 * np.arange(n) / fps), fps)
    scene = SeparableScene(np.full(cam.grid.shape, a_ut * 1e-6), tone)
    ts = recon.to_field(recon.MeanStack(cam.expected_pv(cam.expectation(scene)), cam.acq, 1),
                        sm, cam.nv, off)
    sp = recon.image_average_spectrum(ts)
    k = int(np.argmax(sp.amplitudes))
    got = sp.amplitudes[k]
    dt = time.perf_counter() - t
    rel = abs(got / a_ut - 1)
    ok = np.isclose(sp.frequencies[k], 130.0) and rel < 0.01 and dt < 10
    record("4", ok, f"peak {got:.5f} uT at {sp.frequencies[k]:.2f} Hz for A = {a_ut} uT, "
                    f"rel err {rel:.2e}; {dt:.2f} s")
    assert ok


# -- 5 and 6 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def noise_setup():
    cfg = load_config("noise")
    cam = cfg.build_camera()
    slopes, offset = calibrate_camera(cam)
    return cfg, cam.with_config(f_mw=slopes.f_max), slopes, offset


def _noise(cfg, cam, slopes, offset, n, checkpoints):
    exp = cam.expectation(cfg.build_scene())
    window = (cfg.quiet_start_ms * 1e-3, cfg.quiet_stop_ms * 1e-3)
    return recon.noise_stats((cam.acquire(exp, k) for k in range(n)), slopes, cam.nv, offset,
                             window, cfg.quiet_period_ms * 1e-3, checkpoints,
                             cfg.build_waveform(), cam.grid.usable_mask())


def test_criterion_5_sqrt_n(noise_setup):
    t = time.perf_counter()
    cfg, cam, slopes, offset = noise_setup
    ck = [2 ** j for j in range(9)]
    ns = _noise(cfg, cam, slopes, offset, 256, ck)
    dt = time.perf_counter() - t
    fit = recon.fit_power_law(ns.n, ns.std_ut)
    # plateau check: fit N <= 128, then the N = 256 point must fall in the 95% prediction band
    x, y = np.log(ns.n[:-1]), np.log(ns.std_ut[:-1])
    lf = sstats.linregress(x, y)
    resid = y - (lf.intercept + lf.slope * x)
    s = np.sqrt(resid @ resid / (x.size - 2))
    x0 = np.log(ns.n[-1])
    band = sstats.t.ppf(0.975, x.size - 2) * s * np.sqrt(1 + 1 / x.size + (x0 - x.mean()) ** 2 / ((x - x.mean()) @ (x - x.mean())))
    r_last = np.log(ns.std_ut[-1]) - (lf.intercept + lf.slope * x0)
    ok = abs(fit.exponent + 0.5) <= 0.05 and abs(r_last) <= band and dt < 300
    record("5", ok, f"exponent {fit.exponent:.4f} +- {fit.exponent_se:.4f}; std {ns.std_ut[0]:.3f} -> "
                    f"{ns.std_ut[-1]:.4f} uT; N=256 residual {r_last:+.4f} (band {band:.4f}); {dt:.1f} s")
    assert ok


def test_criterion_6_noise_histogram(noise_setup):
    cfg, cam, slopes, offset = noise_setup
    base = _noise(cfg, cam, slopes, offset, 4, [4])
    phi2 = cfg.replace(photons_per_frame=2 * cfg.photons_per_frame)
    cam2 = phi2.build_camera()
    slopes2, offset2 = calibrate_camera(cam2)
    doubled = _noise(phi2, cam2.with_config(f_mw=slopes2.f_max), slopes2, offset2, 4, [4])
    ratio = doubled.mode / base.mode
    ok = (base.skewness > 0 and base.n_modes == 1 and doubled.n_modes == 1
          and abs(ratio * np.sqrt(2) - 1) <= 0.05)
    record("6", ok, f"skewness {base.skewness:.3f}, modes {base.n_modes}/{doubled.n_modes}, "
                    f"mode {base.mode:.3f} -> {doubled.mode:.3f} uT, ratio {ratio:.4f} "
                    f"(1/sqrt2 = {1 / np.sqrt(2):.4f})")
    assert ok


# -- 7 --------------------------------------------------------------------------

def test_criterion_7_pulse_recovery():
    t = time.perf_counter()
    cfg = load_config("pulse")
    cam = cfg.build_camera()
    slopes, offset = calibrate_camera(cam)
    cam = cam.with_config(f_mw=slopes.f_max)
    exp = cam.expectation(cfg.build_scene())
    grid = cam.grid
    fwd = field_map(cfg.build_layout(), cfg.current_ma * 1e-3, grid, cfg.standoff_um, cfg.axis).values * 1e6
    track_dist = abs(grid.x[FAR_PX[1]]) - cfg.track_width_um / 2

    rm = recon.RunningMean()
    amp64 = None
    n_detect = None
    snr_far = None
    k = 0
    while k < 1024 and (amp64 is None or n_detect is None):
        rm.add(cam.acquire(exp, k))
        k += 1
        if k & (k - 1):
            continue
        ts = recon.to_field(rm.mean(), slopes, cam.nv, offset)
        sig, noise = cli.signal_and_noise(cfg, ts)
        if n_detect is None and recon.snr_mask(sig, noise, 3.0).mask[FAR_PX]:
            n_detect, snr_far = k, sig[FAR_PX] / noise[FAR_PX]
        if k == 64:
            amp64 = sig[TRACK_PX]
    dt = time.perf_counter() - t
    rel = abs(amp64 / fwd[TRACK_PX] - 1)
    ok = rel < 0.05 and n_detect is not None and dt < 300
    record("7", ok, f"N=64 amplitude {amp64:.3f} uT vs forward {fwd[TRACK_PX]:.3f} uT (rel {rel:.4f}); "
                    f"{track_dist:.2f} um from track: SNR {snr_far if snr_far is None else round(snr_far, 1)} "
                    f"first > 3 at N = {n_detect}; {dt:.1f} s")
    assert ok


# -- 8 --------------------------------------------------------------------------

def test_criterion_8_fepsp_shape():
    cfg = load_config("fepsp")
    cam = cfg.build_camera()
    slopes, offset = calibrate_camera(cam)
    cam = cam.with_config(f_mw=slopes.f_max)
    exp = cam.expectation(cfg.build_scene())
    mean = recon.average_acquisitions(cam.acquire(exp, k) for k in range(256))
    ts = recon.to_field(mean, slopes, cam.nv, offset)
    sig, noise = cli.signal_and_noise(cfg, ts)
    masked = recon.snr_mask(sig, noise, cfg.snr_threshold)
    trace = recon.masked_average(ts, masked.mask, sig)
    ref = wf.frame_average(cfg.build_waveform(), cfg.fps_hz, cfg.frames_per_acq)
    r = sstats.pearsonr(trace, ref).statistic
    ok = r > 0.99
    record("8", ok, f"Pearson r {r:.5f} over {int(masked.mask.sum())} masked pixels, N=256")
    assert ok


# -- 9 --------------------------------------------------------------------------

def test_criterion_9_determinism_and_calibration(tmp_path):
    text = load_config("ac130").replace(n_acquisitions=2).serialize()
    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(text)
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli.main(["run", "--config", str(cfg_path), "--out", str(o)]) for o in outs]

    def hashes(o):
        return {m.name: json.loads(m.read_text())["outputs"] for m in sorted(o.glob("manifest_*.json"))}

    same = codes == [0, 0] and hashes(outs[0]) == hashes(outs[1]) and len(hashes(outs[0])) == 4
    cal = cli.read_calibration(outs[0])
    f_max = float(cal["f_max_mhz"])
    cfg = load_config(cfg_path)
    cam = cfg.build_camera(f_max)
    got = fmt.read_field_map(outs[0] / "slopes.map").values
    want = analytic_pv_slope(cam, f_max)
    live = np.isfinite(got)
    err = np.max(np.abs(got[live] / want[live] - 1))
    pct = float(cal["contrast_pct"])
    lo, hi = cfg.contrast_band_pct
    ok = same and err < 0.02 and lo <= pct <= hi and live.mean() > 0.8
    record("9", ok, f"identical checksums {same}; max slope error {err * 100:.2f}% over "
                    f"{int(live.sum())} live pixels; contrast {pct:.3f}% in [{lo}, {hi}]")
    assert ok


# -- 10 -------------------------------------------------------------------------

def test_criterion_10_demodulation_contracts():
    grid = PixelGrid.centered(8, 8, 1.5)
    checks = {}

    # DC rejection: no fluorescence modulation far from resonance
    cam = make_camera(grid, f_mw=2600.0, frames_per_acq=500, offset_spread=0)
    s = cam.acquire(cam.expectation(), 1)
    sigma = cam.gain * np.sqrt(cam.acq.photons_per_pixel_per_frame)
    # one test on the image-wide mean rather than 128 per-pixel tests at 3 sigma each
    tol = 3 * sigma / np.sqrt(s.i.size)
    di = abs(np.mean(s.i - cam.offset_i))
    dq = abs(np.mean(s.q - cam.offset_q))
    checks["dc"] = (di < tol and dq < tol, f"|I|,|Q| {di:.4f},{dq:.4f} < {tol:.4f} codes")

    # zero phase: a constant field at the operating point lands in I
    cam = make_camera(grid, f_mw=F_CENTER + 2.0, frames_per_acq=50)
    i, q = cam.expected_iq(cam.expectation(SeparableScene(np.full(grid.shape, 10e-6))))
    pi = np.sum((i - cam.offset_i) ** 2)
    pq = np.sum((q - cam.offset_q) ** 2)
    checks["phase"] = (pq < 0.01 * pi, f"Q/I power {pq / pi:.2e}")

    # 10-bit clamping under extreme gain
    cam = make_camera(grid, photons_per_pixel_per_frame=50.0, frames_per_acq=50)
    s = cam.acquire(cam.expectation())
    q_ok = quantize(np.array([-7.0, 0.4, 1023.4, 5e4])).tolist() == [0, 0, 1023, 1023]
    clamp = q_ok and min(s.i.min(), s.q.min()) >= 0 and max(s.i.max(), s.q.max()) <= CODE_MAX
    checks["clamp"] = (clamp, f"codes {min(s.i.min(), s.q.min())}..{max(s.i.max(), s.q.max())}")

    # Nyquist folding: frame-integrated tone aliases with sinc attenuation
    fps, n, b = 3500.0, 350, 2e-6
    folds = []
    for f_sig in (300.0, 2100.0, 3000.0):
        cam = make_camera(grid, scatter=0.0, frames_per_acq=n, fps=fps, f_mod=4 * fps)
        scene = SeparableScene(np.full(grid.shape, b), lambda t, f=f_sig: np.sin(2 * np.pi * f * t))
        pv = cam.expected_pv(cam.expectation(scene))[:, 4, 4]
        amp = 2 * np.abs(np.fft.rfft(pv - pv.mean())) / n
        freqs = np.fft.rfftfreq(n, 1 / fps)
        alias = abs(f_sig - fps * round(f_sig / fps))
        i0, q0 = cam.expected_iq(cam.expectation())
        chain = i0[0, 4, 4] / np.hypot(i0[0, 4, 4], q0[0, 4, 4])
        # small-signal pv amplitude: lineshape slope x field shift x readout chain
        line = slope_dpvdf(cam.acq.f_mw, cam.f0[4, 4], cam.nv)
        want = abs(cam.gain * cam.photons[4, 4] * line * cam.nv.mhz_per_tesla * b * chain
                   * np.sinc(f_sig / fps))
        k = int(np.argmax(amp))
        folds.append((np.isclose(freqs[k], alias) and abs(amp[k] / want - 1) < 0.01, f_sig, alias, amp[k] / want))
    checks["nyquist"] = (all(f[0] for f in folds),
                         "; ".join(f"{f:g}->{a:g} Hz ratio {r:.4f}" for _, f, a, r in folds))

    ok = all(v[0] for v in checks.values())
    record("10", ok, " | ".join(f"{k} {'PASS' if v[0] else 'FAIL'} {v[1]}" for k, v in checks.items()))
    assert ok

