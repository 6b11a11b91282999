"""``nvw`` command line: calibrate, simulate, analyze and render stages.

Every stage writes into ``--out`` and finishes by atomically writing
``manifest_<stage>.json``; a stage that fails leaves no manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import formats as fmt
from . import recon
from .config import ConfigError, ExperimentConfig, load_config, preset_names
from .geometry import FieldMap

EXIT_OK, EXIT_ERROR, EXIT_CALIBRATION, EXIT_MISMATCH = 0, 1, 2, 3


class MismatchError(RuntimeError):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Stage:
    """Collects a stage's outputs and writes its manifest on success."""

    def __init__(self, out: Path, name: str, cfg: ExperimentConfig):
        self.out, self.name, self.cfg = out, name, cfg
        self.outputs: list[Path] = []
        self.manifest = out / f"manifest_{name}.json"

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest.unlink(missing_ok=True)
        self.started = time.time()
        return self

    def add(self, path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False
        doc = {
            "stage": self.name,
            "tool_version": __version__,
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.seed,
            "started": self.started,
            "finished": time.time(),
            "outputs": {str(p.relative_to(self.out)): sha256(p) for p in sorted(self.outputs)},
        }
        fmt.atomic_write(self.manifest, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
        return False


def _map(grid_pitch: float, standoff: float, values, units: str, **meta) -> FieldMap:
    return FieldMap(np.asarray(values, float), grid_pitch, standoff, units, meta)


# -- calibrate -----------------------------------------------------------------

def cmd_calibrate(cfg: ExperimentConfig, out: Path, log=print) -> dict:
    cam = cfg.build_camera()
    grid = cam.grid
    with Stage(out, "calibrate", cfg) as st:
        coarse = np.arange(cfg.scan_start_mhz, cfg.scan_stop_mhz + cfg.scan_step_mhz / 2,
                           cfg.scan_step_mhz)
        curve = np.empty(coarse.size)
        for k, f in enumerate(coarse):
            c = cam.with_config(f_mw=float(f), frames_per_acq=cfg.coarse_frames)
            curve[k] = c.acquire(c.expectation(), 2_000_000 + k).pv.mean()
        fmt.write_csv(st.add(out / "odmr_coarse.csv"), ["freq_mhz", "mean_pv"], [coarse, curve])
        try:
            feature = recon.coarse_feature(coarse, curve)
        except recon.CalibrationError as e:
            raise recon.CalibrationError(
                f"{e} (scanned {cfg.scan_start_mhz}-{cfg.scan_stop_mhz} MHz)") from None

        h = cfg.fine_half_span_mhz
        fine = feature + np.arange(-h, h + cfg.fine_step_mhz / 2, cfg.fine_step_mhz)
        stacks = recon.calibration_stacks(cam, fine, cfg.calib_frames, cfg.calib_averages)
        slopes = recon.calibrate(stacks, fine)
        ref_cam = cam.with_config(f_mw=slopes.f_max, frames_per_acq=cfg.calib_frames)
        ref_exp = ref_cam.expectation()
        offset = recon.pixel_offset([ref_cam.acquire(ref_exp, 3_000_000 + j)
                                     for j in range(cfg.calib_averages)])
        slopes = recon.calibrate(stacks, fine, offset=offset)

        fmt.write_csv(st.add(out / "odmr_fine.csv"), ["freq_mhz", "mean_pv"], [fine, slopes.curve])
        pitch, z = grid.pitch, cfg.standoff_um
        fmt.write_field_map(st.add(out / "slopes.map"),
                            _map(pitch, z, np.where(slopes.dead, np.nan, slopes.slope),
                                 "codes/MHz", f_max_mhz=slopes.f_max))
        fmt.write_field_map(st.add(out / "f0.map"), _map(pitch, z, slopes.f0, "MHz"))
        fmt.write_field_map(st.add(out / "offset.map"), _map(pitch, z, offset, "codes",
                                                             f_mw_mhz=slopes.f_max))

        span = cfg.intensity_half_span_mhz
        ifreq = feature + np.arange(-span, span + cfg.intensity_step_mhz / 2, cfg.intensity_step_mhz)
        imean = np.array([cam.intensity_frames(float(f), 20, k).mean() for k, f in enumerate(ifreq)])
        fit = recon.fit_lorentzian(ifreq, imean, feature, cfg.linewidth_mhz)
        fmt.write_csv(st.add(out / "odmr_intensity.csv"), ["freq_mhz", "mean_intensity"], [ifreq, imean])

        lo, hi = cfg.contrast_band_pct
        pct = 100 * fit.contrast
        summary = {"f_max_mhz": slopes.f_max, "feature_mhz": float(feature),
                   "contrast_pct": pct, "contrast_in_band": bool(lo <= pct <= hi),
                   "dead_pixels": int(slopes.dead.sum()),
                   "median_slope_codes_per_mhz": float(np.median(np.abs(slopes.slope)))}
        txt = "".join(f"{k} {v!r}\n" for k, v in summary.items())
        fmt.atomic_write(st.add(out / "calibration.txt"), txt.encode())
    log(f"f_max {slopes.f_max:.3f} MHz; image-mean contrast {pct:.3f}% "
        f"({'inside' if summary['contrast_in_band'] else 'outside'} {lo}-{hi}% band)")
    return summary


def read_calibration(out: Path) -> dict:
    path = out / "calibration.txt"
    if not path.is_file():
        raise MismatchError(f"{path} missing: run calibrate first")
    d = {}
    for line in path.read_text().splitlines():
        k, _, v = line.partition(" ")
        d[k] = v
    return d


# -- simulate ------------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Path, log=print) -> list[Path]:
    cal = out / "calibration.txt"
    f_mw = float(read_calibration(out)["f_max_mhz"]) if cal.is_file() else None
    cam = cfg.build_camera(f_mw)
    if f_mw is None:
        log(f"no calibration found; using the analytic resonance {cam.acq.f_mw:.3f} MHz")
    exp = cam.expectation(cfg.build_scene())
    sdir = out / "stacks"
    with Stage(out, "simulate", cfg) as st:
        sdir.mkdir(parents=True, exist_ok=True)
        for old in sdir.glob("acq_*.nvs"):
            old.unlink()
        paths = []
        for k in range(cfg.n_acquisitions):
            p = st.add(sdir / f"acq_{k:04d}.nvs")
            fmt.write_stack(p, cam.acquire(exp, k))
            paths.append(p)
    log(f"wrote {len(paths)} acquisitions of {cfg.frames_per_acq} frames at {cfg.fps_hz:g} fps")
    return paths


# -- analyze -------------------------------------------------------------------

def _check_stack(stack, cfg: ExperimentConfig, path) -> None:
    want = {"rows": cfg.rows, "cols": cfg.cols, "frames": cfg.frames_per_acq,
            "fps": cfg.fps_hz, "f_mod": cfg.f_mod_hz, "seed": cfg.seed}
    f, r, c = stack.shape
    have = {"rows": r, "cols": c, "frames": f, "fps": stack.config.fps,
            "f_mod": stack.config.f_mod, "seed": stack.config.seed}
    bad = [k for k in want if want[k] != have[k]]
    if bad:
        raise MismatchError(f"{path}: {', '.join(f'{k}={have[k]} (config {want[k]})' for k in bad)}")


def _iter_stacks(paths, cfg):
    for p in paths:
        s = fmt.read_stack(p)
        _check_stack(s, cfg, p)
        yield s


def signal_and_noise(cfg: ExperimentConfig, ts: recon.PixelTimeseries):
    """Per-pixel signal (uT) and the standard error of that estimate."""
    v = ts.values
    if cfg.waveform == "pulse_train":
        res = recon.pulse_metrics(ts, cfg.pulse_period_ms, cfg.pulse_fwd_ms, cfg.pulse_rev_ms)
        sd = np.sqrt(0.5 * (v[res.on_frames].var(axis=0, ddof=1) + v[res.off_frames].var(axis=0, ddof=1)))
        return res.amplitude, sd * np.sqrt(1 / res.on_frames.size + 1 / res.off_frames.size)
    if cfg.waveform == "fepsp":
        t = ts.times
        on = cfg.fepsp_onset_ms * 1e-3
        base = t + 1 / ts.fps <= on
        resp = (t >= on + 1e-3) & (t <= on + 6e-3)
        sig = v[resp].mean(axis=0) - v[base].mean(axis=0)
        sd = v[base].std(axis=0, ddof=1)
        return sig, sd * np.sqrt(1 / resp.sum() + 1 / base.sum())
    sp = recon.spectrum(ts)
    k = int(np.argmin(np.abs(sp.frequencies - cfg.frequency_hz)))
    sig = sp.amplitudes[k]
    harm = np.zeros(sp.frequencies.size, bool)
    harm[0] = True
    for m in range(1, int(sp.frequencies[-1] / max(cfg.frequency_hz, 1e-9)) + 1):
        j = int(np.argmin(np.abs(sp.frequencies - m * cfg.frequency_hz)))
        harm[max(0, j - 1):j + 2] = True
    floor = np.sqrt(np.mean(sp.amplitudes[~harm] ** 2, axis=0))
    # signed by the fundamental's phase so opposite sides of the track differ in sign
    X = np.fft.rfft(v - v.mean(axis=0), axis=0)[k]
    ref = np.angle(np.nansum(X[np.isfinite(X)]))
    sign = np.sign(np.real(X * np.exp(-1j * ref)))
    return sig * np.where(sign == 0, 1.0, sign), floor


def cmd_analyze(cfg: ExperimentConfig, out: Path, stack_paths=None, log=print) -> dict:
    sdir = out / "stacks"
    paths = sorted(stack_paths) if stack_paths is not None else sorted(sdir.glob("acq_*.nvs"))
    if not paths:
        raise MismatchError(f"no stacks to analyze in {sdir}")
    cal = read_calibration(out)
    f_max = float(cal["f_max_mhz"])
    slope_fm = fmt.read_field_map(out / "slopes.map")
    off_fm = fmt.read_field_map(out / "offset.map")
    if slope_fm.shape != (cfg.rows, cfg.cols):
        raise MismatchError("slope map shape differs from the config grid")
    slope = slope_fm.values
    dead = ~np.isfinite(slope)
    slopes = recon.SlopeMap(np.where(dead, 0.0, slope), np.full(slope.shape, np.nan), f_max,
                            dead, 0.0, np.array([f_max]), np.array([]), np.array([]))
    nv = cfg.build_nv()
    mean = recon.average_acquisitions(_iter_stacks(paths, cfg))
    ts = recon.to_field(mean, slopes, nv, off_fm.values)
    grid = cfg.build_grid()
    pitch, z = grid.pitch, cfg.standoff_um

    summary = {"n_acquisitions": mean.n}
    with Stage(out, "analyze", cfg) as st:
        sig, noise = signal_and_noise(cfg, ts)
        masked = recon.snr_mask(sig, noise, cfg.snr_threshold)
        fmt.write_field_map(st.add(out / "signal.map"), _map(pitch, z, sig, "uT"))
        fmt.write_field_map(st.add(out / "noise.map"), _map(pitch, z, noise, "uT"))
        fmt.write_field_map(st.add(out / "masked.map"),
                            _map(pitch, z, masked.values, "uT", snr_threshold=cfg.snr_threshold))
        summary["masked_pixels"] = int(masked.mask.sum())
        live = np.isfinite(ts.values[0])
        sel = masked.mask if masked.mask.any() else live
        trace = recon.masked_average(ts, sel, np.where(np.isfinite(sig), sig, 0.0)
                                     if masked.mask.any() else None)
        fmt.write_csv(st.add(out / "timeseries.csv"), ["t_s", "field_uT"], [ts.times, trace])
        sp = recon.image_average_spectrum(ts, sel)
        fmt.write_csv(st.add(out / "spectrum.csv"), ["freq_hz", "amplitude_uT"],
                      [sp.frequencies, sp.amplitudes])

        if cfg.waveform == "fepsp":
            r, c = np.unravel_index(int(np.nanargmax(np.where(masked.mask, np.abs(sig), -1))),
                                    sig.shape) if masked.mask.any() else (cfg.rows // 2, cfg.cols // 2)
            cols, names = [ts.times], ["t_s"]
            for j in range(cfg.trace_pixels):
                cc = c - j * cfg.trace_step_px
                if cc < 0:
                    break
                cols.append(ts.values[:, r, cc] + j * cfg.trace_offset_ut)
                names.append(f"px_r{r}_c{cc}_uT")
            fmt.write_csv(st.add(out / "traces.csv"), names, cols)

        if cfg.quiet_start_ms is not None:
            window = (cfg.quiet_start_ms * 1e-3, cfg.quiet_stop_ms * 1e-3)
            period = None if cfg.quiet_period_ms is None else cfg.quiet_period_ms * 1e-3
            ck = cfg.noise_checkpoints or tuple(sorted({2 ** j for j in range(20) if 2 ** j <= mean.n} | {mean.n}))
            ns = recon.noise_stats(_iter_stacks(paths, cfg), slopes, nv, off_fm.values, window,
                                   period, ck, cfg.build_waveform(), grid.usable_mask())
            fmt.write_csv(st.add(out / "noise.csv"), ["n", "std_uT"], [ns.n, ns.std_ut])
            fmt.write_csv(st.add(out / "noise_histogram.csv"), ["lo_uT", "hi_uT", "count"],
                          [ns.hist_edges[:-1], ns.hist_edges[1:], ns.hist_counts])
            summary.update(noise_std_ut=float(ns.std_ut[-1]), sensitivity_nt_rthz=ns.sensitivity_nt,
                           noise_skewness=ns.skewness)
        txt = "".join(f"{k} {v!r}\n" for k, v in summary.items())
        fmt.atomic_write(st.add(out / "analysis.txt"), txt.encode())
    log(f"analyzed {mean.n} acquisitions; {summary['masked_pixels']} pixels above SNR {cfg.snr_threshold:g}")
    return summary


# -- render --------------------------------------------------------------------

def cmd_render(cfg: ExperimentConfig, out: Path, maps=None, log=print) -> list[Path]:
    srcs = [Path(m) for m in maps] if maps else sorted(out.glob("*.map"))
    rdir = out / "render"
    written = []
    with Stage(out, "render", cfg) as st:
        rdir.mkdir(parents=True, exist_ok=True)
        for m in srcs:
            fm = fmt.read_field_map(m)
            p = st.add(rdir / f"{m.stem}.pgm")
            st.add(fmt.write_pgm(p, fm))
            written.append(p)
    log(f"rendered {len(written)} maps into {rdir}")
    return written


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nvw", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("calibrate", "simulate", "analyze", "render", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help=f"config file or preset name ({', '.join(preset_names())})")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, default=Path("nvw_out"))
        if name == "analyze":
            p.add_argument("stacks", nargs="*", type=Path, help="stack files (default: OUT/stacks)")
        if name == "render":
            p.add_argument("maps", nargs="*", type=Path, help="map files (default: OUT/*.map)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        out = args.out
        if args.command in ("calibrate", "run"):
            cmd_calibrate(cfg, out)
        if args.command in ("simulate", "run"):
            cmd_simulate(cfg, out)
        if args.command == "analyze":
            cmd_analyze(cfg, out, args.stacks or None)
        elif args.command == "run":
            cmd_analyze(cfg, out)
        if args.command in ("render", "run"):
            cmd_render(cfg, out, getattr(args, "maps", None))
    except recon.CalibrationError as e:
        print(f"nvw: calibration failed: {e}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (MismatchError, recon.StackMismatchError) as e:
        print(f"nvw: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ConfigError, fmt.FormatError, OSError, ValueError) as e:
        print(f"nvw: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
