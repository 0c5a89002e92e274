"""Map distributed force sensors onto contact keypoints.

Sensors and keypoints share a 2-D hand chart (a flattening of the palm
side) tiled by a 4x4 grid of square regions. Each keypoint takes its value
from the sensors of its own region through bidirectional (bilinear)
interpolation, then the value is thresholded into a binary contact
reading.

The shipped chart is synthetic: it reproduces the physical counts (82
finger sensors, 66 palm sensors, 148 total, 16 regions, 0-5 N range) with
plausible positions, since the real coordinates are not published.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoders import TactileFrame
from .errors import OutOfDomainError
from .flow2tactile import binarize_readings

READING_RANGE = (0.0, 5.0)  # newtons


@dataclass(frozen=True)
class RegionGrid:
    """Axis-aligned square tiling of the chart; half-open squares
    [origin, origin + side) so every boundary point has a unique owner."""

    origin: tuple[float, float] = (0.0, 0.0)
    side: float = 0.04
    rows: int = 4
    cols: int = 4

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    def region_origin(self, region: int) -> np.ndarray:
        row, col = divmod(region, self.cols)
        return np.array([self.origin[0] + col * self.side, self.origin[1] + row * self.side])


@dataclass(frozen=True)
class SensorLayout:
    """Sensor ids, chart positions (meters), and per-sensor region ids."""

    ids: np.ndarray
    positions: np.ndarray
    regions: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.intp)
        pos = np.asarray(self.positions, dtype=np.float64)
        reg = np.asarray(self.regions, dtype=np.intp)
        if pos.shape != (ids.shape[0], 2) or reg.shape != ids.shape:
            raise ValueError("layout arrays must align: ids (S,), positions (S, 2), regions (S,)")
        if not np.all(np.isfinite(pos)):
            raise ValueError("sensor positions must be finite")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "regions", reg)

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def assign_region(grid: RegionGrid, chart_pos) -> int:
    """Index of the half-open square containing the position."""
    p = np.asarray(chart_pos, dtype=np.float64)
    col = int(np.floor((p[0] - grid.origin[0]) / grid.side))
    row = int(np.floor((p[1] - grid.origin[1]) / grid.side))
    if not (0 <= col < grid.cols and 0 <= row < grid.rows):
        raise OutOfDomainError(f"position {p.tolist()} falls outside the chart")
    return row * grid.cols + col


def interpolate_region_bilinear(sensor_pts, readings, query) -> float:
    """Reading at a query position from same-region sensors.

    Searches, nearest levels first, for four sensors forming an axis-aligned
    rectangle that encloses the query, and bilinearly interpolates over it
    (collapsing to linear or exact lookup when the query sits on a grid line
    or node). When no corner-forming rectangle exists, the nearest sensor's
    reading is used.
    """
    pts = np.asarray(sensor_pts, dtype=np.float64)
    vals = np.asarray(readings, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
        raise ValueError("need at least one sensor position of shape (S, 2)")
    if vals.shape != (pts.shape[0],):
        raise ValueError("readings must align with sensor positions")
    q = np.asarray(query, dtype=np.float64)

    xs = np.unique(pts[:, 0])
    ys = np.unique(pts[:, 1])
    xs_lo = xs[xs <= q[0]][::-1]  # nearest level first
    xs_hi = xs[xs >= q[0]]
    ys_lo = ys[ys <= q[1]][::-1]
    ys_hi = ys[ys >= q[1]]

    def at(x, y):
        hit = np.flatnonzero((np.abs(pts[:, 0] - x) < 1e-12) & (np.abs(pts[:, 1] - y) < 1e-12))
        return None if hit.size == 0 else float(vals[hit[0]])

    for x0 in xs_lo:
        for x1 in xs_hi:
            for y0 in ys_lo:
                for y1 in ys_hi:
                    v00, v10, v01, v11 = at(x0, y0), at(x1, y0), at(x0, y1), at(x1, y1)
                    if None in (v00, v10, v01, v11):
                        continue
                    if x0 == x1 and y0 == y1:
                        return v00
                    if x0 == x1:
                        wy = (q[1] - y0) / (y1 - y0)
                        return float(v00 * (1 - wy) + v01 * wy)
                    if y0 == y1:
                        wx = (q[0] - x0) / (x1 - x0)
                        return float(v00 * (1 - wx) + v10 * wx)
                    wx = (q[0] - x0) / (x1 - x0)
                    wy = (q[1] - y0) / (y1 - y0)
                    return float(
                        v00 * (1 - wx) * (1 - wy)
                        + v10 * wx * (1 - wy)
                        + v01 * (1 - wx) * wy
                        + v11 * wx * wy
                    )
    # nearest-neighbor fallback for sparse or hull-exterior queries
    d2 = ((pts - q) ** 2).sum(axis=1)
    return float(vals[int(np.argmin(d2))])


def map_readings_to_keypoints(layout: SensorLayout, grid: RegionGrid, keypoint_chart, readings) -> np.ndarray:
    """Continuous per-keypoint values: assign each keypoint to its region and
    interpolate within it."""
    kp = np.asarray(keypoint_chart, dtype=np.float64)
    if kp.ndim != 2 or kp.shape[1] != 2:
        raise ValueError("keypoint chart positions must be (N_k, 2)")
    r = np.asarray(readings, dtype=np.float64)
    if r.shape != (len(layout),):
        raise ValueError(f"expected {len(layout)} readings, got {r.shape}")
    if np.any(r < READING_RANGE[0]) or np.any(r > READING_RANGE[1]):
        raise ValueError(f"readings must lie in {READING_RANGE} N")
    out = np.empty(kp.shape[0])
    for i, pos in enumerate(kp):
        region = assign_region(grid, pos)
        mask = layout.regions == region
        if not np.any(mask):
            raise ValueError(f"region {region} contains no sensors")
        out[i] = interpolate_region_bilinear(layout.positions[mask], r[mask], pos)
    return out


def sensors_to_keypoints(layout: SensorLayout, grid: RegionGrid, keypoint_chart, readings,
                         threshold: float = 0.1) -> TactileFrame:
    """Binary contact frame at the keypoints: interpolate, then threshold."""
    values = map_readings_to_keypoints(layout, grid, keypoint_chart, readings)
    return binarize_readings(values, threshold)


# ---------------------------------------------------------------------------
# synthetic chart


def build_shadow_chart() -> tuple[SensorLayout, RegionGrid]:
    """148-sensor chart: five finger strips (8 + 3 + 6 sensors per finger,
    the thumb without the middle 3) over the top half, a 11x6 palm grid over
    the bottom half."""
    grid = RegionGrid(origin=(0.0, 0.0), side=0.04, rows=4, cols=4)
    pts: list[tuple[float, float]] = []
    # palm: 66 sensors
    for y in np.linspace(0.006, 0.074, 6):
        for x in np.linspace(0.006, 0.154, 11):
            pts.append((float(x), float(y)))
    # fingers: strips of width 0.032, thumb first (no second-phalanx sensors)
    for f in range(5):
        cx = 0.016 + 0.032 * f
        for y in np.linspace(0.082, 0.106, 4):  # first phalanx: 8
            for x in (cx - 0.008, cx + 0.008):
                pts.append((float(x), float(y)))
        if f != 0:
            for y in np.linspace(0.112, 0.124, 3):  # second phalanx: 3
                pts.append((float(cx), float(y)))
        for y in np.linspace(0.134, 0.156, 3):  # third phalanx: 6
            for x in (cx - 0.008, cx + 0.008):
                pts.append((float(x), float(y)))
    positions = np.asarray(pts)
    regions = np.array([assign_region(grid, p) for p in positions])
    return SensorLayout(np.arange(len(pts)), positions, regions), grid


def save_sensor_layout(path, layout: SensorLayout, grid: RegionGrid) -> None:
    doc = {
        "sensors": [
            {"id": int(layout.ids[i]), "x": float(layout.positions[i, 0]),
             "y": float(layout.positions[i, 1]), "region": int(layout.regions[i])}
            for i in range(len(layout))
        ],
        "grid": {"origin": list(grid.origin), "side": grid.side, "rows": grid.rows, "cols": grid.cols},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_sensor_layout(path) -> tuple[SensorLayout, RegionGrid]:
    with open(path) as fh:
        doc = json.load(fh)
    g = doc["grid"]
    grid = RegionGrid(origin=tuple(g["origin"]), side=g["side"], rows=g["rows"], cols=g["cols"])
    sensors = doc["sensors"]
    layout = SensorLayout(
        ids=np.array([s["id"] for s in sensors]),
        positions=np.array([[s["x"], s["y"]] for s in sensors]),
        regions=np.array([s["region"] for s in sensors]),
    )
    return layout, grid


def read_readings_csv(path, n_sensors: int = 148):
    """Yield (timestamp, readings) rows from an offline replay CSV of the
    form: timestamp, r0, ..., r{n-1}."""
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.lower().startswith("timestamp"):
                continue
            cells = line.split(",")
            if len(cells) != n_sensors + 1:
                raise ValueError(f"expected {n_sensors + 1} columns, got {len(cells)}")
            yield float(cells[0]), np.array([float(c) for c in cells[1:]])
