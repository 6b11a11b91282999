"""Experiment configuration: flat ``key = value`` text with unit-suffixed keys.

Example::

    seed = 7
    layout = cross_y
    waveform = square
    current_ma = 4
    frequency_hz = 130
    standoff_um = 50

``layout`` is ``cross_x``, ``cross_y`` or a layout file path; ``waveform_file``
is a sampled-waveform CSV. Relative paths resolve against the config file's
directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import get_type_hints

import numpy as np

from . import waveforms as wf
from .camera import AcquisitionConfig, LockInCamera, SeparableScene, circuit_scene, zero_scene
from .geometry import CircuitLayout, PixelGrid, make_cross_layout, read_layout
from .nv import NVModel

PRESET_DIR = Path(__file__).with_name("presets")
_REQUIRED = ("seed",)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    # circuit and drive
    layout: str = "cross_y"
    track_width_um: float = 10.0
    center_width_um: float = 5.0
    center_extent_um: float = 15.0
    arm_length_um: float = 225.0
    waveform: str = "square"
    current_ma: float = 4.0
    frequency_hz: float = 130.0
    duty: float = 0.5
    pulse_fwd_ms: float = 1.0
    pulse_rev_ms: float = 1.0
    pulse_period_ms: float = 20.0
    fepsp_onset_ms: float = 20.0
    fepsp_decay_fast_ms: float = 1.0
    fepsp_decay_slow_ms: float = 5.0
    fepsp_artifact_ms: float = 0.05
    waveform_file: str | None = None
    # NV physics
    zero_field_splitting_mhz: float = 2870.0
    gyro_hz_per_nt: float = 28.0
    contrast: float = 0.014
    linewidth_mhz: float = 0.5
    fm_deviation_mhz: float = 4.0
    sensing_axis: tuple = (1.0, 1.0, 1.0)
    bias_mt: tuple = (2.295, 2.295, 2.295)
    f0_scatter_mhz: float = 0.1
    # pixel grid
    rows: int = 300
    cols: int = 300
    pitch_um: float = 1.5
    center_x_um: float = 0.0
    center_y_um: float = 0.0
    usable_rows: int = 292
    usable_cols: int = 280
    standoff_um: float = 10.0
    # acquisition
    fps_hz: float = 650.0
    f_mod_hz: float = 2600.0
    frames_per_acq: int = 500
    n_acquisitions: int = 1
    photons_per_frame: float = 1.66e6
    trigger_phase_rad: float = 0.0
    oversample: int = 8
    illumination_ratio: float = 1.0
    desync_threshold_hz: float | None = None
    workers: int = 1
    # calibration
    scan_start_mhz: float = 2700.0
    scan_stop_mhz: float = 3100.0
    scan_step_mhz: float = 1.0
    coarse_frames: int = 20
    fine_half_span_mhz: float = 2.0
    fine_step_mhz: float = 0.5
    calib_frames: int = 500
    calib_averages: int = 16
    intensity_half_span_mhz: float = 16.0
    intensity_step_mhz: float = 0.5
    contrast_band_pct: tuple = (1.2, 1.6)
    # analysis
    snr_threshold: float = 3.0
    quiet_start_ms: float | None = None
    quiet_stop_ms: float | None = None
    quiet_period_ms: float | None = None
    noise_checkpoints: tuple = ()
    trace_pixels: int = 5
    trace_step_px: int = 4
    trace_offset_ut: float = -20.0
    source_dir: str | None = None  # not serialized; where relative paths resolve

    def __post_init__(self):
        pos = ["pitch_um", "standoff_um", "fps_hz", "f_mod_hz", "linewidth_mhz",
               "fm_deviation_mhz", "gyro_hz_per_nt", "scan_step_mhz", "fine_step_mhz",
               "fine_half_span_mhz", "intensity_step_mhz"]
        for k in pos:
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        for k in ("rows", "cols", "frames_per_acq", "n_acquisitions", "calib_frames",
                  "calib_averages", "coarse_frames", "workers"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        if self.photons_per_frame < 0:
            raise ConfigError("photons_per_frame must be >= 0")
        if not 0 < self.contrast < 1:
            raise ConfigError("contrast must lie in (0, 1)")
        if self.scan_stop_mhz <= self.scan_start_mhz:
            raise ConfigError("scan_stop_mhz must exceed scan_start_mhz")
        if self.waveform not in ("square", "pulse_train", "fepsp", "sampled", "none"):
            raise ConfigError(f"unknown waveform {self.waveform!r}")
        if self.waveform == "sampled" and not self.waveform_file:
            raise ConfigError("waveform = sampled needs waveform_file")
        for k in ("sensing_axis", "bias_mt"):
            if len(getattr(self, k)) != 3:
                raise ConfigError(f"{k} needs three components")
        if len(self.contrast_band_pct) != 2:
            raise ConfigError("contrast_band_pct needs two values")
        if (self.quiet_start_ms is None) != (self.quiet_stop_ms is None):
            raise ConfigError("quiet_start_ms and quiet_stop_ms go together")

    # -- paths -----------------------------------------------------------------

    def resolve(self, p: str) -> Path:
        path = Path(p)
        if not path.is_absolute() and self.source_dir:
            path = Path(self.source_dir) / path
        return path

    def check_files(self) -> None:
        if self.layout not in ("cross_x", "cross_y") and not self.resolve(self.layout).is_file():
            raise ConfigError(f"layout file {self.layout} not found")
        if self.waveform_file and not self.resolve(self.waveform_file).is_file():
            raise ConfigError(f"waveform file {self.waveform_file} not found")

    # -- builders --------------------------------------------------------------

    def build_nv(self) -> NVModel:
        nv = NVModel(self.zero_field_splitting_mhz, self.gyro_hz_per_nt, contrast=self.contrast,
                     linewidth=self.linewidth_mhz, fm_deviation=self.fm_deviation_mhz)
        return nv.with_sensing_axis(self.sensing_axis)

    @property
    def axis(self) -> np.ndarray:
        a = np.asarray(self.sensing_axis, float)
        return a / np.linalg.norm(a)

    @property
    def bias(self) -> np.ndarray:
        return np.asarray(self.bias_mt, float) * 1e-3

    def build_grid(self) -> PixelGrid:
        return PixelGrid.centered(self.rows, self.cols, self.pitch_um,
                                  (self.center_x_um, self.center_y_um),
                                  usable_rows=min(self.usable_rows, self.rows),
                                  usable_cols=min(self.usable_cols, self.cols))

    def build_layout(self) -> CircuitLayout:
        if self.layout in ("cross_x", "cross_y"):
            return make_cross_layout(self.track_width_um, self.center_width_um,
                                     self.center_extent_um, self.arm_length_um, self.layout[-1])
        return read_layout(self.resolve(self.layout))

    def build_waveform(self):
        a = self.current_ma * 1e-3
        if self.waveform == "square":
            return wf.square_wave(self.frequency_hz, a, self.duty)
        if self.waveform == "pulse_train":
            return wf.pulse_train(self.pulse_fwd_ms, self.pulse_rev_ms, self.pulse_period_ms, a)
        if self.waveform == "fepsp":
            return wf.fepsp(a, self.fepsp_artifact_ms, self.fepsp_decay_fast_ms,
                            self.fepsp_decay_slow_ms, self.fepsp_onset_ms)
        if self.waveform == "sampled":
            return wf.load_csv(self.resolve(self.waveform_file)).scaled(a)
        return None

    def build_acq(self, f_mw: float | None = None) -> AcquisitionConfig:
        f = self.build_nv().sensing_center(self.bias) if f_mw is None else f_mw
        return AcquisitionConfig(
            fps=self.fps_hz, f_mod=self.f_mod_hz, frames_per_acq=self.frames_per_acq,
            n_acquisitions=self.n_acquisitions, photons_per_pixel_per_frame=self.photons_per_frame,
            trigger_phase=self.trigger_phase_rad, seed=self.seed, f_mw=float(f),
            oversample=self.oversample, illumination_ratio=self.illumination_ratio,
            desync_threshold=self.desync_threshold_hz)

    def build_camera(self, f_mw: float | None = None) -> LockInCamera:
        return LockInCamera(self.build_nv(), self.build_acq(f_mw), self.build_grid(),
                            bias=self.bias, f0_scatter=self.f0_scatter_mhz, workers=self.workers)

    def build_scene(self) -> SeparableScene:
        w = self.build_waveform()
        grid = self.build_grid()
        if w is None:
            return zero_scene(grid)
        return circuit_scene(self.build_layout(), w, grid, self.standoff_um, self.axis)

    # -- text form ---------------------------------------------------------------

    def serialize(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "source_dir":
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return " ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(name: str, hint, raw: str):
    raw = raw.strip()
    optional = "None" in str(hint)
    if optional and raw.lower() == "none":
        return None
    base = str(hint).replace(" | None", "")
    try:
        if base in ("int", "<class 'int'>"):
            return int(raw)
        if base in ("float", "<class 'float'>"):
            return float(raw)
        if base in ("tuple", "<class 'tuple'>"):
            parts = raw.split()
            if name == "noise_checkpoints":
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def parse_config(text: str, source_dir=None) -> ExperimentConfig:
    hints = get_type_hints(ExperimentConfig)
    names = {f.name for f in fields(ExperimentConfig)} - {"source_dir"}
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in kw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kw[key] = _convert(key, hints[key], val)
    for k in _REQUIRED:
        if k not in kw:
            raise ConfigError(f"missing mandatory key {k!r}")
    if source_dir is not None:
        kw["source_dir"] = str(source_dir)
    return ExperimentConfig(**kw)


def find_config(name_or_path) -> Path:
    """A config file path, or the name of a packaged preset."""
    p = Path(name_or_path)
    if p.is_file():
        return p
    preset = PRESET_DIR / f"{p.name}.cfg" if p.suffix != ".cfg" else PRESET_DIR / p.name
    if preset.is_file():
        return preset
    raise ConfigError(f"no config file or preset named {name_or_path}")


def load_config(name_or_path, check_files: bool = True) -> ExperimentConfig:
    path = find_config(name_or_path)
    cfg = parse_config(path.read_text(), source_dir=path.parent)
    if check_files:
        cfg.check_files()
    return cfg


def preset_names() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.cfg"))
