"""Circuit layouts and their Biot-Savart fields.

Positions are in micrometres, currents in amperes and fields in tesla.
Current is carried as a line along each segment centreline; the track width
is kept as metadata only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MU0 = 4e-7 * np.pi
# mu0 / 4pi with positions in micrometres
_KM = 1e-7 * 1e6

SINGULAR_DISTANCE_UM = 1e-6
CONNECT_TOL_UM = 1e-9


class GeometryError(ValueError):
    """Invalid circuit geometry."""


class SingularityError(ValueError):
    """Field requested on a current-carrying centreline."""


@dataclass(frozen=True)
class WireSegment:
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    width: float = 10.0

    def __post_init__(self):
        start = tuple(float(v) for v in self.start)
        end = tuple(float(v) for v in self.end)
        if len(start) != 3 or len(end) != 3:
            raise GeometryError("segment endpoints must be 3-vectors")
        if not np.all(np.isfinite(start + end)):
            raise GeometryError("segment endpoints must be finite")
        if start == end:
            raise GeometryError("segment start and end coincide")
        if not self.width > 0:
            raise GeometryError(f"segment width must be positive, got {self.width}")
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "end", end)
        object.__setattr__(self, "width", float(self.width))

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.end, self.start)))


@dataclass(frozen=True)
class CircuitLayout:
    """An ordered, end-to-start connected current path."""

    segments: tuple[WireSegment, ...]
    name: str = "layout"

    def __post_init__(self):
        segs = tuple(self.segments)
        if not segs:
            raise GeometryError("layout needs at least one segment")
        for a, b in zip(segs, segs[1:]):
            gap = np.linalg.norm(np.subtract(a.end, b.start))
            if gap > CONNECT_TOL_UM:
                raise GeometryError(
                    f"segments not connected: gap {gap:.3g} um between {a.end} and {b.start}"
                )
        object.__setattr__(self, "segments", segs)

    def rotated_z(self, quarter_turns: int = 1) -> "CircuitLayout":
        rot = rotation_z(quarter_turns)
        segs = tuple(
            WireSegment(tuple(rot @ s.start), tuple(rot @ s.end), s.width)
            for s in self.segments
        )
        return CircuitLayout(segs, self.name)

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.array([s.start for s in self.segments], dtype=float)
        b = np.array([s.end for s in self.segments], dtype=float)
        return a, b


@dataclass(frozen=True)
class FieldSample:
    B: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.B)):
            raise ValueError("non-finite field sample")


def rotation_z(quarter_turns: int = 1) -> np.ndarray:
    """Exact integer rotation by 90 degree steps about z."""
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][quarter_turns % 4]
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=float)


def make_cross_layout(
    track_width: float = 10.0,
    center_width: float = 5.0,
    center_extent: float = 15.0,
    arm_length: float = 225.0,
    axis: str = "y",
) -> CircuitLayout:
    """One current path of the cross circuit, straight through the origin.

    The cross is two independent paths; ``axis`` picks which one carries
    current. The middle segment spans ``±center_extent/2`` and carries the
    narrowed width.
    """
    dims = dict(track_width=track_width, center_width=center_width,
                center_extent=center_extent, arm_length=arm_length)
    for k, v in dims.items():
        if not v > 0:
            raise GeometryError(f"{k} must be positive, got {v}")
    if center_width > track_width:
        raise GeometryError("center_width must not exceed track_width")
    if center_extent / 2 >= arm_length:
        raise GeometryError("center_extent must fit inside the arms")
    if axis not in ("x", "y"):
        raise GeometryError(f"axis must be 'x' or 'y', got {axis!r}")

    h = center_extent / 2.0
    stops = [-arm_length, -h, h, arm_length]
    widths = [track_width, center_width, track_width]
    segs = []
    for a, b, w in zip(stops, stops[1:], widths):
        if axis == "y":
            segs.append(WireSegment((0.0, a, 0.0), (0.0, b, 0.0), w))
        else:
            segs.append(WireSegment((a, 0.0, 0.0), (b, 0.0, 0.0), w))
    return CircuitLayout(tuple(segs), name=f"cross_{axis}")


def _dot3(u: np.ndarray, v) -> np.ndarray:
    # fixed-order component sum; matmul kernels may reorder with array shape
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def _segment_field(a: np.ndarray, b: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Field per unit current of one straight segment a->b at ``pts`` (..., 3).

    Closed form B = k (R1 x R2)(|R1|+|R2|) / (|R1||R2|(|R1||R2| + R1.R2)),
    exact for a finite filament. Returned in T/A.
    """
    r1 = pts - a
    r2 = pts - b
    n1 = np.sqrt(_dot3(r1, r1))
    n2 = np.sqrt(_dot3(r2, r2))
    dot = _dot3(r1, r2)
    cross = np.cross(r1, r2)
    denom = n1 * n2 * (n1 * n2 + dot)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(denom > 0, _KM * (n1 + n2) / denom, 0.0)
    return cross * scale[..., None]


def _distance_to_segment(a: np.ndarray, b: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(_dot3(pts - a, ab) / _dot3(ab, ab), 0.0, 1.0)
    closest = a + t[..., None] * ab
    d = pts - closest
    return np.sqrt(_dot3(d, d))


def field_per_amp(layout: CircuitLayout, points) -> np.ndarray:
    """Field (T/A) of ``layout`` at an array of points (..., 3) in um.

    Segments are accumulated in layout order so every point's sum is
    independent of how the points are partitioned.
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    total = np.zeros(pts.shape, dtype=float)
    for seg in layout.segments:
        a = np.asarray(seg.start)
        b = np.asarray(seg.end)
        if np.any(_distance_to_segment(a, b, pts) < SINGULAR_DISTANCE_UM):
            raise SingularityError("field requested on a segment centreline")
        total += _segment_field(a, b, pts)
    return total


def field_at_point(layout: CircuitLayout, current: float, point) -> FieldSample:
    p = np.asarray(point, dtype=float)
    return FieldSample(B=float(current) * field_per_amp(layout, p), position=p)


def project(B, axis) -> float | np.ndarray:
    """Component of ``B`` along a unit ``axis``."""
    ax = np.asarray(axis, dtype=float)
    if ax.shape != (3,) or abs(np.linalg.norm(ax) - 1.0) > 1e-9:
        raise ValueError(f"projection axis must be a unit 3-vector, got {axis}")
    out = _dot3(np.asarray(B, dtype=float), ax)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class PixelGrid:
    """Camera pixel grid mapped onto the NV plane.

    Pixel (r, c) sits at ``origin + (c*pitch, r*pitch, 0)``; columns run
    along x and rows along y.
    """

    rows: int = 300
    cols: int = 300
    pitch: float = 1.5
    origin: tuple[float, float, float] = (-224.25, -224.25, 0.0)
    usable_rows: int | None = None
    usable_cols: int | None = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one pixel")
        if not self.pitch > 0:
            raise ValueError("pixel pitch must be positive")
        ur = self.rows if self.usable_rows is None else self.usable_rows
        uc = self.cols if self.usable_cols is None else self.usable_cols
        if not (0 < ur <= self.rows and 0 < uc <= self.cols):
            raise ValueError("usable region must fit inside the grid")
        object.__setattr__(self, "usable_rows", int(ur))
        object.__setattr__(self, "usable_cols", int(uc))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @classmethod
    def centered(cls, rows=300, cols=300, pitch=1.5, center=(0.0, 0.0), **kw):
        x0 = center[0] - (cols - 1) * pitch / 2.0
        y0 = center[1] - (rows - 1) * pitch / 2.0
        return cls(rows, cols, pitch, (x0, y0, 0.0), **kw)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def x(self) -> np.ndarray:
        return self.origin[0] + self.pitch * np.arange(self.cols)

    @property
    def y(self) -> np.ndarray:
        return self.origin[1] + self.pitch * np.arange(self.rows)

    def points(self, z: float) -> np.ndarray:
        """Pixel centres at height ``z``, shape (rows, cols, 3)."""
        xx, yy = np.meshgrid(self.x, self.y)
        return np.stack([xx, yy, np.full_like(xx, self.origin[2] + z)], axis=-1)

    def usable_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        r0 = (self.rows - self.usable_rows) // 2
        c0 = (self.cols - self.usable_cols) // 2
        m[r0:r0 + self.usable_rows, c0:c0 + self.usable_cols] = True
        return m

    def pixel_of(self, x: float, y: float) -> tuple[int, int]:
        c = int(round((x - self.origin[0]) / self.pitch))
        r = int(round((y - self.origin[1]) / self.pitch))
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise ValueError(f"point ({x}, {y}) lies outside the grid")
        return r, c


@dataclass
class FieldMap:
    """A per-pixel scalar image; NaN marks excluded (dead) pixels."""

    values: np.ndarray
    pitch: float
    standoff: float
    units: str = "T"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape

    def normalized(self) -> "FieldMap":
        """Map divided by its own maximum magnitude."""
        peak = np.nanmax(np.abs(self.values))
        vals = self.values / peak if peak > 0 else np.zeros_like(self.values)
        return FieldMap(vals, self.pitch, self.standoff, "1", dict(self.meta))

    def scaled(self, factor: float, units: str) -> "FieldMap":
        return FieldMap(self.values * factor, self.pitch, self.standoff, units, dict(self.meta))


def field_map(
    layout: CircuitLayout,
    current: float,
    grid: PixelGrid,
    standoff: float = 10.0,
    axis=(1 / np.sqrt(3),) * 3,
    block_rows: int | None = None,
) -> FieldMap:
    """Projected field (T) at every pixel centre in the plane z = standoff.

    ``block_rows`` evaluates the grid in row blocks; the result is bitwise
    identical for any block size.
    """
    if grid.rows * grid.cols == 0:
        raise ValueError("empty grid")
    if not standoff > 0:
        raise ValueError("standoff must be positive")
    ax = np.asarray(axis, dtype=float)
    project(np.zeros(3), ax)  # validates the axis
    pts = grid.points(standoff)
    out = np.empty(grid.shape)
    step = grid.rows if block_rows is None else max(1, int(block_rows))
    for r0 in range(0, grid.rows, step):
        blk = pts[r0:r0 + step]
        out[r0:r0 + step] = float(current) * _dot3(field_per_amp(layout, blk), ax)
    return FieldMap(out, grid.pitch, float(standoff), "T",
                    {"layout": layout.name, "current_A": float(current)})


# -- layout text files --------------------------------------------------------

def read_layout(path) -> CircuitLayout:
    """Parse ``x0 y0 z0 x1 y1 z1 width`` lines (um); ``#`` starts a comment."""
    path = Path(path)
    segs = []
    name = path.stem
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if raw.strip().startswith("# name:"):
            name = raw.split(":", 1)[1].strip() or name
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise GeometryError(f"{path}:{lineno}: expected 7 numbers, got {len(parts)}")
        try:
            v = [float(p) for p in parts]
        except ValueError as exc:
            raise GeometryError(f"{path}:{lineno}: {exc}") from None
        segs.append(WireSegment(tuple(v[0:3]), tuple(v[3:6]), v[6]))
    return CircuitLayout(tuple(segs), name=name)


def write_layout(layout: CircuitLayout, path) -> None:
    lines = [f"# name: {layout.name}", "# x0 y0 z0 x1 y1 z1 width (um)"]
    for s in layout.segments:
        nums = list(s.start) + list(s.end) + [s.width]
        lines.append(" ".join(repr(float(v)) for v in nums))
    Path(path).write_text("\n".join(lines) + "\n")
