"""Current waveforms driven through the circuit: I(t) in amperes, t in seconds."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class WaveformError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    kind: str
    amplitude: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.amplitude):
            raise WaveformError("amplitude must be finite")

    def __call__(self, t):
        return self.sample(t)

    def sample(self, t):
        t = np.asarray(t, dtype=float)
        fn = _SAMPLERS[self.kind]
        out = fn(self, t)
        return float(out) if out.ndim == 0 else out

    def scaled(self, factor: float) -> "Waveform":
        return Waveform(self.kind, self.amplitude * factor, dict(self.params))


def _square(w: Waveform, t):
    f = w.params["frequency"]
    duty = w.params.get("duty", 0.5)
    phase = np.mod(t * f, 1.0)
    return np.where(phase < duty, w.amplitude, -w.amplitude)


def _pulse(w: Waveform, t):
    p = w.params
    tau = np.mod(t, p["period"])
    fwd, rev = p["fwd"], p["rev"]
    a = w.amplitude
    return np.where(tau < fwd, a, np.where(tau < fwd + rev, -a, 0.0))


def _fepsp(w: Waveform, t):
    p = w.params
    t_rel = t - p["onset"]
    art = p["artifact_width"]
    a_art = p["artifact_fraction"] * abs(w.amplitude)
    out = np.zeros_like(t_rel)
    # biphasic stimulus artifact: + then - for half the width each
    out = np.where((t_rel >= 0) & (t_rel < art / 2), a_art, out)
    out = np.where((t_rel >= art / 2) & (t_rel < art), -a_art, out)
    tt = t_rel - art
    ts, tf = p["decay_slow"], p["decay_fast"]
    with np.errstate(over="ignore"):
        body = np.where(tt > 0, np.exp(-np.maximum(tt, 0) / ts) - np.exp(-np.maximum(tt, 0) / tf), 0.0)
    return out - w.amplitude * body / _dexp_peak(tf, ts)


def _dexp_peak(tf: float, ts: float) -> float:
    t_pk = tf * ts / (ts - tf) * np.log(ts / tf)
    return float(np.exp(-t_pk / ts) - np.exp(-t_pk / tf))


def _sampled(w: Waveform, t):
    vals = w.params["values"]
    idx = np.floor(t * w.params["rate"]).astype(np.int64)
    idx = np.clip(idx, 0, len(vals) - 1)
    return w.amplitude * vals[idx]


_SAMPLERS = {"square": _square, "pulse_train": _pulse, "fepsp": _fepsp, "sampled": _sampled}


def square_wave(frequency: float, amplitude: float, duty: float = 0.5) -> Waveform:
    """+A for the first ``duty`` of each period, -A for the rest."""
    if not frequency > 0:
        raise WaveformError("frequency must be positive")
    if not 0 < duty < 1:
        raise WaveformError("duty must lie in (0, 1)")
    return Waveform("square", float(amplitude), {"frequency": float(frequency), "duty": float(duty)})


def pulse_train(fwd_ms: float, rev_ms: float, period_ms: float, amplitude: float) -> Waveform:
    if min(fwd_ms, rev_ms) < 0 or not period_ms > 0:
        raise WaveformError("pulse widths must be >= 0 and the period > 0")
    if fwd_ms + rev_ms > period_ms:
        raise WaveformError(f"pulse widths {fwd_ms}+{rev_ms} ms exceed period {period_ms} ms")
    return Waveform("pulse_train", float(amplitude), {
        "fwd": fwd_ms * 1e-3, "rev": rev_ms * 1e-3, "period": period_ms * 1e-3})


def fepsp(
    amplitude: float = 0.020,
    artifact_width_ms: float = 0.05,
    decay_fast_ms: float = 1.0,
    decay_slow_ms: float = 5.0,
    onset_ms: float = 20.0,
    artifact_fraction: float = 0.5,
) -> Waveform:
    """Synthetic field EPSP: short biphasic artifact then a negative
    difference-of-exponentials deflection whose peak magnitude is ``amplitude``."""
    if not decay_slow_ms > decay_fast_ms > 0:
        raise WaveformError("need decay_slow > decay_fast > 0")
    if artifact_width_ms < 0 or not 0 <= artifact_fraction <= 1:
        raise WaveformError("bad artifact parameters")
    return Waveform("fepsp", float(amplitude), {
        "artifact_width": artifact_width_ms * 1e-3,
        "decay_fast": decay_fast_ms * 1e-3,
        "decay_slow": decay_slow_ms * 1e-3,
        "onset": onset_ms * 1e-3,
        "artifact_fraction": float(artifact_fraction),
    })


def sampled(values, rate: float, amplitude: float = 1.0) -> Waveform:
    """Zero-order-hold playback of ``values`` (A) at ``rate`` Hz."""
    vals = np.asarray(values, dtype=float).ravel()
    if vals.size == 0:
        raise WaveformError("sampled waveform needs at least one value")
    if not np.all(np.isfinite(vals)):
        raise WaveformError("sampled values must be finite")
    if not rate > 0:
        raise WaveformError("sample rate must be positive")
    vals.setflags(write=False)
    return Waveform("sampled", float(amplitude), {"values": vals, "rate": float(rate)})


def load_csv(path) -> Waveform:
    """Read a sampled waveform: header ``rate_hz=<value>``, then one value (A) per line."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("rate_hz="):
        raise WaveformError(f"{path}: first line must be rate_hz=<value>")
    rate = float(lines[0].split("=", 1)[1])
    return sampled([float(v) for v in lines[1:]], rate)


def write_csv(path, values, rate: float) -> None:
    body = "\n".join(repr(float(v)) for v in np.asarray(values, dtype=float))
    Path(path).write_text(f"rate_hz={rate!r}\n{body}\n")


def frame_average(w, fps: float, n_frames: int, t0: float = 0.0, oversample: int = 64) -> np.ndarray:
    """Mean of ``w`` over each frame period, as a camera frame integrates it."""
    k = (np.arange(n_frames * oversample) + 0.5) / oversample
    vals = np.asarray(w(t0 + k / fps), dtype=float)
    return vals.reshape(n_frames, oversample).mean(axis=1)
