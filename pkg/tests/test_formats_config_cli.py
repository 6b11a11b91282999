import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_camera
from nvwidefield import cli
from nvwidefield import formats as fmt
from nvwidefield.config import (ConfigError, ExperimentConfig, load_config, parse_config,
                                preset_names)
from nvwidefield.geometry import FieldMap, PixelGrid

SMALL = """\
name = small
seed = 5
layout = cross_y
waveform = square
current_ma = 20
frequency_hz = 130
rows = 8
cols = 8
usable_rows = 8
usable_cols = 8
center_x_um = -20
standoff_um = 50
linewidth_mhz = 4
fps_hz = 650
f_mod_hz = 2600
frames_per_acq = 100
n_acquisitions = 2
scan_start_mhz = 2740
scan_stop_mhz = 2780
coarse_frames = 10
calib_frames = 100
calib_averages = 2
intensity_half_span_mhz = 12
"""


# -- binary formats -----------------------------------------------------------

def test_field_map_round_trip(tmp_path):
    v = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32).astype(float)
    v[2, 3] = np.nan
    fm = FieldMap(v, 1.5, 10.0, "uT", {"f_max_mhz": 2758.7})
    p = tmp_path / "a.map"
    fmt.write_field_map(p, fm)
    back = fmt.read_field_map(p)
    np.testing.assert_array_equal(back.values, v)
    assert (back.pitch, back.standoff, back.units) == (1.5, 10.0, "uT")
    assert float(back.meta["f_max_mhz"]) == 2758.7
    assert p.read_bytes().startswith(b"NVWMAP 1\n")


def test_stack_round_trip(tmp_path):
    cam = make_camera(PixelGrid.centered(3, 4), frames_per_acq=12, trigger_phase=0.3)
    s = cam.acquire(cam.expectation(), 7)
    p = tmp_path / "s.nvs"
    fmt.write_stack(p, s)
    back = fmt.read_stack(p)
    assert np.array_equal(back.i, s.i) and np.array_equal(back.q, s.q)
    assert back.config == s.config and back.index == 7 and back.t0 == s.t0
    assert fmt.encode_stack(back) == p.read_bytes()


def test_malformed_header_names_byte_offset(tmp_path):
    good = fmt.encode_field_map(FieldMap(np.zeros((2, 2)), 1.0, 1.0))
    bad = good.replace(b"\ncols 2\n", b"\ncols2\n")
    p = tmp_path / "bad.map"
    p.write_bytes(bad)
    with pytest.raises(fmt.FormatError, match=f"byte offset {good.index(b'cols')}"):
        fmt.read_field_map(p)
    p.write_bytes(b"NOPE\n" + good[9:])
    with pytest.raises(fmt.FormatError, match="byte offset 0"):
        fmt.read_field_map(p)
    p.write_bytes(good[:-3])
    with pytest.raises(fmt.FormatError, match="byte offset"):
        fmt.read_field_map(p)


def test_csv_round_trip(tmp_path):
    x = np.array([0.1, 1 / 3, 1e-20])
    fmt.write_csv(tmp_path / "c.csv", ["a", "b"], [x, 2 * x])
    head, data = fmt.read_csv(tmp_path / "c.csv")
    assert head == ["a", "b"]
    np.testing.assert_array_equal(data, np.stack([x, 2 * x], axis=1))


def test_render_all_zero_black_and_hot_pixel(tmp_path):
    pgm, _ = fmt.render_pgm(np.zeros((4, 5)))
    assert pgm.startswith(b"P5\n5 4\n255\n") and pgm[-20:] == bytes(20)
    v = np.zeros((6, 9))
    v[4, 7] = -3.0
    v[0, 0] = np.nan
    fm = FieldMap(v, 1.0, 1.0, "uT")
    p = tmp_path / "hot.pgm"
    side = fmt.write_pgm(p, fm)
    img = fmt.read_pgm(p)
    assert img.shape == (6, 9)
    assert img[4, 7] == 255 and np.count_nonzero(img) == 1
    assert "units uT" in side.read_text()


def test_render_idempotent(tmp_path):
    v = np.random.default_rng(1).normal(size=(10, 10))
    a, sa = fmt.render_pgm(v)
    b, sb = fmt.render_pgm(v.copy())
    assert a == b and sa == sb


# -- config -------------------------------------------------------------------

def test_config_examples():
    cfg = parse_config(SMALL)
    assert cfg.rows == 8 and cfg.standoff_um == 50.0 and cfg.seed == 5
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(SMALL + "standoff = 3\n")
    with pytest.raises(ConfigError, match="seed"):
        parse_config(SMALL.replace("seed = 5\n", ""))
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(SMALL + "rows = 9\n")
    with pytest.raises(ConfigError, match="positive"):
        parse_config(SMALL + "pitch_um = -1\n")
    with pytest.raises(ConfigError, match="cannot parse"):
        parse_config(SMALL + "duty = half\n")


def test_config_missing_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text(SMALL.replace("cross_y", "nothere.layout"))
    with pytest.raises(ConfigError, match="not found"):
        load_config(p)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), pitch=st.floats(0.1, 10), standoff=st.floats(0.5, 100),
       bias=st.tuples(*[st.floats(-5, 5)] * 3), ckpt=st.lists(st.integers(1, 512), max_size=4),
       thr=st.one_of(st.none(), st.floats(10, 1e5)))
def test_config_round_trip(seed, pitch, standoff, bias, ckpt, thr):
    cfg = ExperimentConfig(seed=seed, pitch_um=pitch, standoff_um=standoff, bias_mt=bias,
                           noise_checkpoints=tuple(ckpt), desync_threshold_hz=thr)
    again = parse_config(cfg.serialize())
    assert again == cfg
    assert again.serialize() == cfg.serialize()


@pytest.mark.parametrize("name", preset_names())
def test_presets_load_and_build(name):
    cfg = load_config(name)
    assert cfg.name == name
    cfg.build_acq()
    cfg.build_waveform()
    assert cfg.build_grid().shape == (cfg.rows, cfg.cols)


def test_preset_rates():
    assert {n: (load_config(n).fps_hz, load_config(n).f_mod_hz) for n in ("ac490", "ac1510", "pulse")} == {
        "ac490": (1000.0, 6000.0), "ac1510": (3500.0, 14000.0), "pulse": (3500.0, 14000.0)}
    cfg = load_config("ac130")
    assert (cfg.fps_hz, cfg.frames_per_acq, cfg.current_ma, cfg.frequency_hz) == (650.0, 500, 4.0, 130.0)


# -- command line -----------------------------------------------------------------

def _write_cfg(tmp_path, text=SMALL):
    p = tmp_path / "small.cfg"
    p.write_text(text)
    return p


def _manifest_hashes(out):
    return {m.name: json.loads(m.read_text())["outputs"] for m in sorted(Path(out).glob("manifest_*.json"))}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfgp = _write_cfg(tmp)
    out = tmp / "out"
    assert cli.main(["run", "--config", str(cfgp), "--out", str(out)]) == 0
    return cfgp, out


def test_run_outputs_and_manifests(small_run):
    _, out = small_run
    hashes = _manifest_hashes(out)
    assert set(hashes) == {f"manifest_{s}.json" for s in ("calibrate", "simulate", "analyze", "render")}
    listed = [p for h in hashes.values() for p in h]
    assert len(listed) == len(set(listed))
    on_disk = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and not p.name.startswith("manifest_")}
    assert on_disk == set(listed)
    cal = cli.read_calibration(out)
    assert abs(float(cal["f_max_mhz"]) - 2758.7) < 1.0
    assert cal["contrast_in_band"] == "True"
    assert fmt.read_stack(out / "stacks" / "acq_0000.nvs").shape == (100, 8, 8)


def test_rerun_is_byte_identical(small_run, tmp_path):
    cfgp, out = small_run
    out2 = tmp_path / "again"
    assert cli.main(["run", "--config", str(cfgp), "--out", str(out2)]) == 0
    assert _manifest_hashes(out2) == _manifest_hashes(out)


def test_worker_count_does_not_change_outputs(small_run, tmp_path):
    _, out = small_run
    cfgp = _write_cfg(tmp_path, SMALL + "workers = 3\n")
    out2 = tmp_path / "w3"
    assert cli.main(["run", "--config", str(cfgp), "--out", str(out2)]) == 0
    # config digests differ by the workers key; the outputs must not
    assert _manifest_hashes(out2) == _manifest_hashes(out)


def test_scan_missing_resonance_exit_2(tmp_path, capsys):
    cfgp = _write_cfg(tmp_path, SMALL.replace("scan_start_mhz = 2740", "scan_start_mhz = 2600")
                      .replace("scan_stop_mhz = 2780", "scan_stop_mhz = 2650"))
    out = tmp_path / "o"
    assert cli.main(["calibrate", "--config", str(cfgp), "--out", str(out)]) == 2
    assert "2600" in capsys.readouterr().err
    assert not (out / "manifest_calibrate.json").exists()


def test_analyze_mismatch_and_empty_exit_3(small_run, tmp_path):
    cfgp, out = small_run
    other = _write_cfg(tmp_path, SMALL.replace("frames_per_acq = 100", "frames_per_acq = 50"))
    assert cli.main(["analyze", "--config", str(other), "--out", str(out)]) == 3
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["analyze", "--config", str(cfgp), "--out", str(empty)]) == 3
    assert cli.main(["analyze", "--config", str(cfgp), "--out", str(tmp_path / "nocal"),
                     str(out / "stacks" / "acq_0000.nvs")]) == 3


def test_seed_override_changes_stacks(small_run, tmp_path):
    cfgp, out = small_run
    out2 = tmp_path / "s"
    assert cli.main(["run", "--config", str(cfgp), "--seed", "6", "--out", str(out2)]) == 0
    a = _manifest_hashes(out)["manifest_simulate.json"]
    b = _manifest_hashes(out2)["manifest_simulate.json"]
    assert a != b


def test_bad_config_exit_1(tmp_path):
    p = _write_cfg(tmp_path, SMALL + "bogus = 1\n")
    assert cli.main(["calibrate", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
