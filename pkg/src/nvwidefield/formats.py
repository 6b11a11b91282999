"""On-disk formats: field maps, frame stacks, CSV tables and PGM renders.

Binary files start with a text header of ``key value`` lines terminated by
an ``end_header`` line; the payload that follows is little-endian.
"""

from __future__ import annotations

import csv
import dataclasses
import os
from pathlib import Path

import numpy as np

from .camera import AcquisitionConfig, FrameStack
from .geometry import FieldMap

MAP_MAGIC = "NVWMAP 1"
STACK_MAGIC = "NVWSTACK 1"
_END = b"end_header\n"


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file and rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _header(magic: str, items: dict) -> bytes:
    lines = [magic] + [f"{k} {_fmt(v)}" for k, v in items.items()]
    for ln in lines:
        if "\n" in ln:
            raise FormatError("header values must be single-line")
    return ("\n".join(lines) + "\n").encode("ascii") + _END


def _parse_header(buf: bytes, magic: str, path) -> tuple[dict, int]:
    end = buf.find(_END)
    if end < 0:
        raise FormatError(f"{path}: no end_header line found (scanned {len(buf)} bytes)")
    pos = 0
    out = {}
    first = True
    for raw in buf[:end].split(b"\n")[:-1]:
        try:
            line = raw.decode("ascii")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: non-ASCII header at byte offset {pos}") from None
        if first:
            if line != magic:
                raise FormatError(f"{path}: expected '{magic}' at byte offset 0")
            first = False
        else:
            key, sep, val = line.partition(" ")
            if not sep or not key:
                raise FormatError(f"{path}: malformed header line at byte offset {pos}")
            out[key] = val
        pos += len(raw) + 1
    if first:
        raise FormatError(f"{path}: missing magic line at byte offset 0")
    return out, end + len(_END)


def _need(hdr: dict, key: str, conv, path):
    if key not in hdr:
        raise FormatError(f"{path}: header lacks '{key}'")
    try:
        return conv(hdr[key])
    except ValueError:
        raise FormatError(f"{path}: bad value for '{key}': {hdr[key]!r}") from None


# -- field maps -----------------------------------------------------------------

def encode_field_map(fm: FieldMap) -> bytes:
    vals = np.asarray(fm.values)
    if vals.ndim != 2:
        raise FormatError("field maps are 2-D")
    items = {"rows": vals.shape[0], "cols": vals.shape[1], "pitch_um": float(fm.pitch),
             "standoff_um": float(fm.standoff), "units": fm.units}
    for k, v in sorted(fm.meta.items()):
        if " " in str(k):
            raise FormatError(f"meta key {k!r} contains a space")
        items[f"meta.{k}"] = v
    return _header(MAP_MAGIC, items) + vals.astype("<f4").tobytes()


def write_field_map(path, fm: FieldMap) -> None:
    atomic_write(path, encode_field_map(fm))


def read_field_map(path) -> FieldMap:
    buf = Path(path).read_bytes()
    hdr, off = _parse_header(buf, MAP_MAGIC, path)
    rows = _need(hdr, "rows", int, path)
    cols = _need(hdr, "cols", int, path)
    pitch = _need(hdr, "pitch_um", float, path)
    standoff = _need(hdr, "standoff_um", float, path)
    units = hdr.get("units", "")
    n = rows * cols * 4
    if len(buf) - off != n:
        raise FormatError(f"{path}: payload at byte offset {off} holds {len(buf) - off} bytes, expected {n}")
    vals = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
    meta = {k[5:]: v for k, v in hdr.items() if k.startswith("meta.")}
    return FieldMap(vals.astype(np.float64), pitch, standoff, units, meta)


# -- frame stacks -----------------------------------------------------------------

def _acq_items(cfg: AcquisitionConfig) -> dict:
    return {f"acq.{f.name}": getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def _acq_from(hdr: dict, path) -> AcquisitionConfig:
    kw = {}
    for f in dataclasses.fields(AcquisitionConfig):
        key = f"acq.{f.name}"
        if key not in hdr:
            continue
        raw = hdr[key]
        default = f.default
        if raw == "none":
            kw[f.name] = None
        elif isinstance(default, bool):
            kw[f.name] = raw == "true"
        elif isinstance(default, int) and not isinstance(default, bool):
            kw[f.name] = int(raw)
        else:
            kw[f.name] = float(raw)
    try:
        return AcquisitionConfig(**kw)
    except (TypeError, ValueError) as e:
        raise FormatError(f"{path}: invalid acquisition header: {e}") from None


def encode_stack(stack: FrameStack) -> bytes:
    frames, rows, cols = stack.shape
    cfg = stack.config
    items = {"rows": rows, "cols": cols, "frames": frames, "fps": float(cfg.fps),
             "f_mod": float(cfg.f_mod), "seed": int(cfg.seed), "index": int(stack.index),
             "t0": float(stack.t0)}
    items.update(_acq_items(cfg))
    return (_header(STACK_MAGIC, items) + np.asarray(stack.i, "<i2").tobytes()
            + np.asarray(stack.q, "<i2").tobytes())


def write_stack(path, stack: FrameStack) -> None:
    atomic_write(path, encode_stack(stack))


def read_stack(path) -> FrameStack:
    buf = Path(path).read_bytes()
    hdr, off = _parse_header(buf, STACK_MAGIC, path)
    rows = _need(hdr, "rows", int, path)
    cols = _need(hdr, "cols", int, path)
    frames = _need(hdr, "frames", int, path)
    n = frames * rows * cols
    if len(buf) - off != 4 * n:
        raise FormatError(f"{path}: payload at byte offset {off} holds {len(buf) - off} bytes, expected {4 * n}")
    i = np.frombuffer(buf, "<i2", n, off).reshape(frames, rows, cols).astype(np.int16)
    q = np.frombuffer(buf, "<i2", n, off + 2 * n).reshape(frames, rows, cols).astype(np.int16)
    cfg = _acq_from(hdr, path)
    if cfg.frames_per_acq != frames:
        raise FormatError(f"{path}: header frames {frames} disagree with acquisition config")
    return FrameStack(i, q, cfg, _need(hdr, "t0", float, path), _need(hdr, "index", int, path))


# -- CSV ------------------------------------------------------------------------

def write_csv(path, header, columns) -> None:
    """Write equal-length columns with a header row; floats use repr."""
    cols = [np.asarray(c).ravel() for c in columns]
    if len({c.size for c in cols}) > 1:
        raise ValueError("columns differ in length")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_fmt(x.item() if hasattr(x, "item") else x) for x in row])
    os.replace(tmp, path)


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    data = np.array([[float(x) for x in r] for r in rows[1:]]) if len(rows) > 1 else np.empty((0, len(rows[0])))
    return rows[0], data


# -- PGM renders -------------------------------------------------------------------

def render_pgm(values) -> tuple[bytes, str]:
    """8-bit grayscale render of |value| scaled to the map's largest magnitude.

    Masked pixels (NaN or exactly zero) are black. Returns the PGM bytes and
    the colorbar sidecar text.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 2:
        raise FormatError("render needs a 2-D map")
    finite = np.isfinite(v)
    mag = np.where(finite, np.abs(v), 0.0)
    peak = float(mag.max()) if mag.size else 0.0
    img = np.zeros(v.shape, dtype=np.uint8)
    if peak > 0:
        img = np.rint(mag / peak * 255.0).astype(np.uint8)
    rows, cols = v.shape
    pgm = f"P5\n{cols} {rows}\n255\n".encode("ascii") + img.tobytes()
    lo = float(np.min(v[finite])) if finite.any() else 0.0
    hi = float(np.max(v[finite])) if finite.any() else 0.0
    side = (f"scale |value| 0 -> 0, {peak!r} -> 255\n"
            f"min {lo!r}\nmax {hi!r}\nmasked black\n")
    return pgm, side


def write_pgm(path, fm: FieldMap) -> Path:
    """Write ``path`` (.pgm) and ``path`` with a .txt colorbar sidecar."""
    pgm, side = render_pgm(fm.values)
    path = Path(path)
    atomic_write(path, pgm)
    sidecar = path.with_suffix(".txt")
    atomic_write(sidecar, (f"units {fm.units}\n" + side).encode("ascii"))
    return sidecar


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    cols, rows = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], np.uint8, rows * cols).reshape(rows, cols)
